import numpy as np
import pytest

from conftest import tiny_config
from vulqa import numerics as nx
from vulqa.classifier import (ClassifierConfig, ClassifierHead, balance_corpus, classify, encoder_from_model,
                              evaluate_classifier, load_classifier, new_encoder, predict_proba, save_classifier,
                              train_classifier)
from vulqa.data import LabeledCode
from vulqa.errors import CheckpointFormatError, ConfigError, InputError
from vulqa.model import VulQAModel
from vulqa.synthetic import MARKER, marker_corpus


def _pair(cfg=None):
    cfg = cfg or tiny_config()
    return new_encoder(cfg), ClassifierHead(cfg.enc_dim, cfg.seed, cfg.dtype), cfg


def test_balance_corpus():
    data = [LabeledCode(f"p{i}", "C", "x", 1) for i in range(3)] + [LabeledCode(f"n{i}", "C", "y", 0) for i in range(10)]
    out = balance_corpus(data, seed=2)
    assert sum(s.label for s in out) == 3 and len(out) == 6
    assert len({s.id for s in out}) == 6
    assert [s.id for s in out] == [s.id for s in balance_corpus(data, seed=2)]
    with pytest.raises(InputError):
        balance_corpus(data[:3])


def test_probabilities_are_valid_and_batch_independent(small_tok):
    enc, head, _ = _pair()
    codes = [s.code for s in marker_corpus(7)]
    p = predict_proba(enc, head, codes, small_tok)
    assert p.shape == (7,) and np.all((p > 0) & (p < 1))
    one_by_one = np.array([predict_proba(enc, head, [c], small_tok)[0] for c in codes])
    np.testing.assert_allclose(p, one_by_one, atol=1e-12)


def test_softmax_complement(small_tok):
    enc, head, _ = _pair()
    ids = np.array([small_tok.encode("int f(void) { return 0; }")])
    z = head(enc.final(ids, np.ones_like(ids, bool)), np.ones_like(ids, bool)).data[0]
    e = np.exp(z - z.max())
    p1 = predict_proba(enc, head, ["int f(void) { return 0; }"], small_tok)[0]
    assert p1 == pytest.approx(e[1] / e.sum(), abs=1e-12)
    assert 1 - p1 == pytest.approx(e[0] / e.sum(), abs=1e-12)


def test_mean_pool_ignores_padding():
    states = nx.Tensor(np.random.default_rng(0).standard_normal((2, 5, 4)))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
    head = ClassifierHead(4, seed=1, dtype="float64")
    out = head(states, mask).data
    want = states.data[0, :3].mean(0) @ head.proj.weight.data.T + head.proj.bias.data
    np.testing.assert_allclose(out[0], want, atol=1e-12)


def test_classify_output_and_errors(small_tok):
    enc, head, _ = _pair()
    r = classify(enc, head, "int f(void);", small_tok)
    assert set(r) == {"label", "probability"} and r["label"] == int(r["probability"] >= 0.5)
    with pytest.raises(InputError):
        classify(enc, head, "   ", small_tok)
    with pytest.raises(InputError):
        evaluate_classifier(enc, head, [], small_tok)


def test_training_reduces_loss_and_is_deterministic(small_tok):
    corpus = marker_corpus(32)
    runs = []
    for _ in range(2):
        enc, head, _ = _pair()
        rep = train_classifier(enc, head, corpus, ClassifierConfig(epochs=4, batch_size=8, lr=3e-3), small_tok)
        runs.append((rep, predict_proba(enc, head, [s.code for s in corpus], small_tok)))
    assert runs[0][0].losses == runs[1][0].losses
    np.testing.assert_array_equal(runs[0][1], runs[1][1])
    losses = runs[0][0].losses
    assert np.mean(losses[-4:]) < np.mean(losses[:4])
    assert runs[0][0].class_counts == {"0": 16, "1": 16}


def test_encoder_from_model_is_independent(small_tok):
    m = VulQAModel(tiny_config(), small_tok)
    enc = encoder_from_model(m)
    first = next(iter(enc.parameters().values()))
    first.data += 1.0
    assert not np.array_equal(first.data, next(iter(m.encoder.parameters().values())).data)
    assert all(p.name.startswith("encoder.") for p in enc.parameters().values())


def test_save_load_round_trip(small_tok, tmp_path):
    enc, head, cfg = _pair()
    train_classifier(enc, head, marker_corpus(8), ClassifierConfig(epochs=1, batch_size=4), small_tok)
    path = save_classifier(enc, head, small_tok, cfg, tmp_path / "clf.ckpt", extra={"note": 1})
    enc2, head2, tok2, cfg2 = load_classifier(path)
    codes = [s.code for s in marker_corpus(5, seed=3)]
    np.testing.assert_array_equal(predict_proba(enc, head, codes, small_tok), predict_proba(enc2, head2, codes, tok2))
    assert cfg2 == cfg and head2.threshold == 0.5


def test_load_classifier_rejects_model_checkpoint(small_tok, tmp_path):
    from vulqa.checkpoint import save_model
    path = save_model(VulQAModel(tiny_config(), small_tok), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointFormatError):
        load_classifier(path)


def test_marker_corpus_labels():
    for s in marker_corpus(20):
        assert (MARKER in s.code) == bool(s.label)


def test_config_validation():
    with pytest.raises(ConfigError):
        ClassifierConfig(batch_size=0)
    with pytest.raises(ConfigError):
        ClassifierConfig.from_dict({"lr": 1, "momentum": 0.9})

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavy runs (overfit, truncation, CLI) share module-scoped fixtures so
the whole file stays within a few tens of minutes on one CPU core.
"""
import copy
import functools
import json
import time

import numpy as np
import pytest

from conftest import tiny_config
from test_metrics import PAIRS, o_bleu, o_meteor, o_rouge_l, o_rouge_n
from vulqa import numerics as nx
from vulqa.classifier import (ClassifierConfig, ClassifierHead, balance_corpus, evaluate_classifier, new_encoder,
                              train_classifier)
from vulqa.cli import main as cli_main
from vulqa.data import ConversationSample, compute_stats, load_finetune_corpus, write_jsonl
from vulqa.metrics import bleu_n, classification_metrics, meteor, rouge_l, rouge_n
from vulqa.model import (DecodeConfig, ModelConfig, VulQAModel, collate, generate, lora_attach, lora_merge,
                         set_stage_freeze)
from vulqa.synthetic import (VULN_CALLS, code_snippets, corpus_texts, marker_corpus, overfit_corpus,
                             position_corpus)
from vulqa.tokenizer import train_bpe
from vulqa.trainer import STOP_WINDOW, StageConfig, run_stage

from pathlib import Path

FIXTURES = Path(__file__).parent / "fixtures"
RESULTS: dict[int, str] = {}
DESK_LR = 3e-3  # the 2e-5 full-scale rate suits pretrained 7B weights and barely moves a random desk model


def criterion(n: int, title: str):
    """Record and print a PASS/FAIL line for the wrapped test."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
            except BaseException as exc:
                line = f"criterion {n:2d} FAIL  {title}  ({type(exc).__name__}: {str(exc).splitlines()[0][:160]})"
                RESULTS[n] = line
                print(line)
                raise
            line = f"criterion {n:2d} PASS  {title}  [{detail}; {time.perf_counter() - t0:.1f}s]"
            RESULTS[n] = line
            print(line)
        return wrapper
    return deco


# ---------------------------------------------------------------- 1. gradients

GRAD_OPS = {
    "add": (lambda a, b: nx.add(a, b), [(10, 12), (12,)]),
    "mul": (lambda a, b: nx.mul(a, b), [(4, 5, 6), (5, 6)]),
    "scale": (lambda a: nx.scale(a, -1.7), [(120,)]),
    "sum_all": (lambda a: nx.sum_all(a), [(10, 12)]),
    "reshape": (lambda a: nx.reshape(a, (24, 5)), [(10, 12)]),
    "transpose": (lambda a: nx.transpose(a), [(10, 12)]),
    "concat": (lambda a, b: nx.concat([a, b], axis=0), [(8, 12), (6, 12)]),
    "gelu": (lambda a: nx.gelu(a), [(10, 12)]),
    "matmul": (lambda a, b: nx.matmul(a, b), [(2, 6, 10), (10, 8)]),
    "linear": (lambda x, w, b: nx.linear(x, w, b), [(2, 6, 10), (12, 10), (12,)]),
    "softmax": (lambda a: nx.softmax(a), [(10, 12)]),
    "layer_norm": (lambda x, g, b: nx.layer_norm(x, g, b), [(2, 8, 16), (16,), (16,)]),
    "attention_causal": (lambda q, k, v: nx.attention(q, k, v, n_heads=2, causal=True), [(2, 6, 12)] * 3),
    "attention_masked": (lambda q, k, v: nx.attention(
        q, k, v, n_heads=3, causal=False, key_mask=np.array([[1] * 4 + [0] * 2, [1] * 6], bool)), [(2, 6, 12)] * 3),
}


@criterion(1, "gradient correctness (float64 central differences, rel err < 1e-4, >=100 coords, < 2 min)")
def test_c01_gradients(small_tok):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, (fn, shapes) in GRAD_OPS.items():
        inputs = [nx.Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]
        res = nx.gradcheck(fn, inputs, n_coords=240, seed=1)
        assert res.coords >= 100, name
        assert res.rel_error < 1e-4, (name, res.rel_error)
        worst = max(worst, res.rel_error)
    table = nx.Tensor(rng.standard_normal((30, 4)), requires_grad=True)
    ids = rng.integers(0, 30, (4, 12))
    special = [
        ("embedding_lookup", lambda t: nx.embedding_lookup(t, ids), [table]),
        ("cross_entropy", lambda z: nx.cross_entropy(z, rng_targets, ce_mask), [ce_logits]),
        ("mean_pool", lambda x: nx.mean_pool(x, pool_mask), [pool_x]),
    ]
    for name, fn, inputs in special:
        res = nx.gradcheck(fn, inputs, n_coords=240, seed=2)
        assert res.coords >= 100, name
        assert res.rel_error < 1e-4, (name, res.rel_error)
        worst = max(worst, res.rel_error)
    # end to end: every parameter of a float64 model with adapters attached
    m = VulQAModel(tiny_config(), small_tok)
    lora_attach(m)
    for p in m.parameters().values():
        p.data += 0.05 * rng.standard_normal(p.data.shape)
    batch = collate([m.render([("What is wrong?", "A buffer overflow.")], "strcpy(d, s);"),
                     m.render([("Where?", "In f."), ("Fix?", "Bound it.")], "int f(char *p) { gets(p); }")],
                    small_tok.pad_id)
    params = list(m.parameters().values())
    res = nx.gradcheck(lambda *ps: m.forward_loss(batch), params, n_coords=4 * len(params), seed=3)
    assert res.coords >= 100
    assert res.rel_error < 1e-4, res.rel_error
    worst = max(worst, res.rel_error)
    elapsed = time.perf_counter() - t0
    assert elapsed < 120
    return f"{len(GRAD_OPS) + len(special)} ops + forward_loss ({res.coords} coords), worst {worst:.1e}"


_crng = np.random.default_rng(9)
ce_logits = nx.Tensor(_crng.standard_normal((3, 5, 9)), requires_grad=True)
rng_targets = _crng.integers(0, 9, (3, 5))
ce_mask = _crng.random((3, 5)) < 0.7
ce_mask[0, 0] = True
pool_x = nx.Tensor(_crng.standard_normal((3, 6, 8)), requires_grad=True)
pool_mask = np.array([[1] * 6, [1] * 3 + [0] * 3, [1] + [0] * 5], bool)


# ---------------------------------------------------------------- 2. freeze


def _snap(m, pred=lambda n: True):
    return {n: p.data.copy() for n, p in m.named_parameters() if pred(n)}


@criterion(2, "stage freeze (10 steps each, bit-identical frozen weights)")
def test_c02_stage_freeze(small_tok):
    corpus = overfit_corpus(20)
    m = VulQAModel(tiny_config(), small_tok)
    init = _snap(m)
    run_stage(m, corpus, StageConfig("pretrain", batch_size=2, lr=1e-2, max_steps=10))
    after1 = _snap(m)
    for n in init:
        if n.startswith("projector."):
            continue
        assert np.array_equal(init[n], after1[n]), n
    proj_delta = np.sqrt(sum(np.sum((after1[n] - init[n]) ** 2) for n in init if n.startswith("projector.")))
    assert proj_delta > 0
    rep = run_stage(m, corpus, StageConfig("finetune", batch_size=2, lr=1e-2, max_steps=10))
    assert rep.steps == 10
    after2 = _snap(m)
    changed = set()
    for n, arr in after2.items():
        ref = after1.get(n)
        if ref is None:  # adapter weights appear in stage 2
            assert ".lora_" in n, n
            changed.add(n)
            continue
        if n.startswith("encoder."):
            assert np.array_equal(init[n], arr), n
        if not np.array_equal(ref, arr):
            changed.add(n)
    assert changed and all(n.startswith("projector.") or ".lora_" in n for n in changed)
    assert any(".lora_B" in n and not np.all(after2[n] == 0) for n in after2)
    return f"stage-1 projector L2 delta {proj_delta:.3e}; stage-2 changed {len(changed)} tensors, all projector/LoRA"


# ---------------------------------------------------------------- 3. LoRA


@criterion(3, "LoRA identities (attach no-op, merge within 1e-5, alpha/r = 1 at full scale)")
def test_c03_lora(small_tok):
    m = VulQAModel(tiny_config(), small_tok)
    corpus = overfit_corpus(8)
    batch = collate([m.render(s.turns, s.code) for s in corpus[:4]], small_tok.pad_id)
    before = m.logits(batch).data.copy()
    lora_attach(m)
    assert np.array_equal(before, m.logits(batch).data)
    m.stages_done.append("pretrain")
    run_stage(m, corpus, StageConfig("finetune", batch_size=4, lr=2e-2, max_steps=15))
    adapted = m.logits(batch).data.copy()
    assert not np.allclose(adapted, before)
    merged = lora_merge(copy.deepcopy(m))
    assert not merged.lora_modules()
    diff = float(np.max(np.abs(merged.logits(batch).data - adapted)))
    assert diff < 1e-5
    # float32 desk model too
    m32 = VulQAModel(tiny_config(dtype="float32"), small_tok)
    lora_attach(m32)
    for mod in m32.lora_modules().values():
        mod.lora_B.data[...] = np.random.default_rng(1).standard_normal(mod.lora_B.shape).astype("float32") * 0.05
    a32 = m32.logits(batch).data
    diff32 = float(np.max(np.abs(lora_merge(m32).logits(batch).data - a32)))
    assert diff32 < 1e-5
    cfg = ModelConfig.full_scale()
    assert cfg.lora_rank == 64 and cfg.lora_alpha / cfg.lora_rank == 1.0
    return f"merge max |dlogit| float64 {diff:.1e}, float32 {diff32:.1e}"


# ---------------------------------------------------------------- 4. metrics


@criterion(4, "metric oracles (50 random pairs within 1e-9, hand anchors)")
def test_c04_metrics():
    worst = 0.0
    for h, r in PAIRS:
        for got, want in ((bleu_n(h, r, 2), o_bleu(h, r, 2)), (bleu_n(h, r, 4), o_bleu(h, r, 4)),
                          (rouge_n(h, r, 1), o_rouge_n(h, r, 1)), (rouge_n(h, r, 2), o_rouge_n(h, r, 2)),
                          (rouge_l(h, r), o_rouge_l(h, r)), (meteor(h, r), o_meteor(h, r))):
            worst = max(worst, abs(got - want))
    assert len(PAIRS) == 50 and worst < 1e-9
    rng = np.random.default_rng(21)
    for _ in range(50):
        pred, gold = rng.integers(0, 2, 20), rng.integers(0, 2, 20)
        tp = int(np.sum((pred == 1) & (gold == 1)))
        fp = int(np.sum((pred == 1) & (gold == 0)))
        fn = int(np.sum((pred == 0) & (gold == 1)))
        p = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * rc / (p + rc) if p + rc else 0.0
        got = classification_metrics(pred, gold)
        for key, want in (("accuracy", float(np.mean(pred == gold))), ("precision", p), ("recall", rc), ("f1", f1)):
            assert abs(got[key] - want) < 1e-9
    assert abs(bleu_n("a b x d", "a b c d", 2) - 0.5) < 1e-12
    assert abs(rouge_l("a b c", "a c b") - 2 / 3) < 1e-12
    assert abs(meteor("the cat", "the cat") - 0.9375) < 1e-12
    anchor = classification_metrics([1] * 4 + [0] * 6, [1] * 3 + [0] + [1] * 2 + [0] * 4)
    assert abs(anchor["f1"] - 2 / 3) < 1e-12
    return f"worst oracle gap {worst:.1e}"


# ---------------------------------------------------------------- 5 + 7. overfit and splice


OVERFIT_TARGET = 0.02  # keep going past 0.1 so greedy decoding is stable; still capped at 2000 steps


@pytest.fixture(scope="module")
def overfit_run():
    corpus = overfit_corpus(32)
    tok = train_bpe(corpus_texts(corpus) + code_snippets(100), 512)
    cfg = ModelConfig()
    assert (cfg.vocab_size, cfg.enc_dim, cfg.llm_dim, cfg.dec_layers) == (512, 64, 128, 4)
    m = VulQAModel(cfg, tok)
    t0 = time.perf_counter()
    rep = run_stage(m, corpus, StageConfig("finetune", from_scratch=True, epochs=500, batch_size=8, lr=DESK_LR,
                                           max_steps=2000, stop_loss=OVERFIT_TARGET))
    dcfg = DecodeConfig(max_new_tokens=32)
    outputs = [generate(m, s.code, s.turns[0][0], dcfg) for s in corpus]
    return dict(model=m, corpus=corpus, report=rep, outputs=outputs, seconds=time.perf_counter() - t0, dcfg=dcfg)


@criterion(5, "overfit smoke (desk config, 32 samples, loss < 0.1 within 2000 steps, >=90% exact, < 10 min)")
def test_c05_overfit(overfit_run):
    rep, corpus, outputs = overfit_run["report"], overfit_run["corpus"], overfit_run["outputs"]
    losses = np.asarray(rep.losses)
    windows = np.convolve(losses, np.ones(STOP_WINDOW) / STOP_WINDOW, mode="valid")
    below = np.flatnonzero(windows < 0.1)
    first = int(below[0]) + STOP_WINDOW if below.size else None
    final = float(windows[-1])
    exact = sum(o == s.turns[0][1] for o, s in zip(outputs, corpus)) / len(corpus)
    assert rep.steps <= 2000
    assert first is not None and first <= 2000 and final < 0.1, (first, final)
    assert exact >= 0.9, exact
    assert overfit_run["seconds"] < 600
    return (f"loss < 0.1 at step {first}, stopped at {rep.steps} with {final:.4f}; exact {exact:.3f}; "
            f"train+decode {overfit_run['seconds']:.0f}s")


def _swap_call(code: str) -> str:
    for i, (call, _, _) in enumerate(VULN_CALLS):
        if call in code:
            return code.replace(call, VULN_CALLS[(i + 1) % len(VULN_CALLS)][0])
    raise AssertionError("no vulnerable call in probe code")


@criterion(7, "modal splice (zeroed projector => code-invariant logits; trained => answers follow code in >=90%)")
def test_c07_splice(overfit_run, small_tok):
    m0 = VulQAModel(tiny_config(), small_tok)
    m0.set_zero_code(True)
    by_len = {}
    for code in code_snippets(80, seed=5):
        by_len.setdefault(len(small_tok.encode(code)), []).append(code)
    pairs = [(v[0], v[1]) for k, v in sorted(by_len.items()) if len(v) > 1 and k <= 128][:5]
    assert pairs
    q = [("What is the vulnerability in this code?", "A bug.")]
    for c1, c2 in pairs:
        assert c1 != c2
        l1 = m0.logits(collate([m0.render(q, c1)], small_tok.pad_id)).data
        l2 = m0.logits(collate([m0.render(q, c2)], small_tok.pad_id)).data
        assert np.array_equal(l1, l2)
    m0.set_zero_code(False)
    assert not np.array_equal(m0.logits(collate([m0.render(q, pairs[0][0])], small_tok.pad_id)).data,
                              m0.logits(collate([m0.render(q, pairs[0][1])], small_tok.pad_id)).data)

    m, corpus, outputs, dcfg = (overfit_run[k] for k in ("model", "corpus", "outputs", "dcfg"))
    changed = 0
    for s, out in zip(corpus, outputs):
        changed += generate(m, _swap_call(s.code), s.turns[0][0], dcfg) != out
    frac = changed / len(corpus)
    assert frac >= 0.9, frac
    return f"zeroed: {len(pairs)} equal-length code pairs give identical logits; answer changed in {changed}/{len(corpus)} probes"


# ---------------------------------------------------------------- 6. truncation


def _position_accuracy(tok, train, test, max_code_tokens):
    m = VulQAModel(ModelConfig(), tok)
    # lower rate plus clipping: at DESK_LR this corpus diverges after a few hundred steps
    rep = run_stage(m, train, StageConfig("finetune", from_scratch=True, epochs=500, batch_size=8, lr=1e-3,
                                          grad_clip=1.0, max_steps=2000, stop_loss=OVERFIT_TARGET,
                                          max_code_tokens=max_code_tokens))
    dcfg = DecodeConfig(max_new_tokens=24, max_code_tokens=max_code_tokens)
    acc = lambda cs: sum(generate(m, s.code, s.turns[0][0], dcfg) == s.turns[0][1] for s in cs) / len(cs)
    return acc(test), acc(train[:64]), rep


@criterion(6, "truncation ablation (full >= 90% exact, 100-token <= chance + 10%, identical training)")
def test_c06_truncation():
    train = position_corpus(128, seed=1, prefix_lines=9, varied_lines=1)
    test = position_corpus(64, seed=2, prefix_lines=9, varied_lines=1)
    # tokenizer never sees the shared prefix as a unit, so it cannot compress the key into the first 100 tokens
    tok = train_bpe([t for s in train for t in s.turns[0]] + code_snippets(200) + corpus_texts(overfit_corpus(32)),
                    512)
    lens = [len(tok.encode(s.code)) for s in train + test]
    firsts = {tuple(tok.encode(s.code)[:100]) for s in train + test}
    assert min(lens) > 110 and max(lens) <= 500 and len(firsts) == 1
    full_test, full_train, _ = _position_accuracy(tok, train, test, 1000)
    cut_test, cut_train, _ = _position_accuracy(tok, train, test, 100)
    chance = 1 / 4
    detail = (f"full test {full_test:.3f} (train {full_train:.3f}); 100-token test {cut_test:.3f} "
              f"(train {cut_train:.3f}); chance {chance:.2f}")
    assert full_test >= 0.9, detail
    assert cut_test <= chance + 0.10, detail
    return detail


# ---------------------------------------------------------------- 8. classifier


@criterion(8, "classifier protocol (exact balance; marker dataset accuracy >= 0.95 within 5 min)")
def test_c08_classifier():
    skewed = [s for s in marker_corpus(300, seed=4) if s.label == 0] + \
             [s for s in marker_corpus(60, seed=5) if s.label == 1]
    bal = balance_corpus(skewed, seed=0)
    counts = (sum(s.label == 0 for s in bal), sum(s.label == 1 for s in bal))
    assert counts[0] == counts[1] == 30
    t0 = time.perf_counter()
    train, test = marker_corpus(256, seed=0), marker_corpus(128, seed=1)
    tok = train_bpe(code_snippets(200) + [s.code for s in train[:64]], 512)
    cfg = ModelConfig()
    enc, head = new_encoder(cfg), ClassifierHead(cfg.enc_dim, cfg.seed, cfg.dtype)
    train_classifier(enc, head, balance_corpus(train, 0), ClassifierConfig(), tok)
    _, metrics = evaluate_classifier(enc, head, test, tok)
    elapsed = time.perf_counter() - t0
    assert metrics["accuracy"] >= 0.95
    assert elapsed < 300
    return f"balanced {counts}; held-out accuracy {metrics['accuracy']:.3f}, F1 {metrics['f1']:.3f}"


# ---------------------------------------------------------------- 9. data fidelity


@criterion(9, "data fidelity (5-turn CVE sample round trip, 5 answer spans; 4-code stats by hand)")
def test_c09_data(tmp_path, small_tok):
    (s,) = load_finetune_corpus(FIXTURES / "cve_2018_1000039.jsonl")
    write_jsonl([s], tmp_path / "rt.jsonl")
    (back,) = load_finetune_corpus(tmp_path / "rt.jsonl")
    assert back == s and len(back.turns) == 5
    m = VulQAModel(tiny_config(context_length=2048), small_tok)
    seq = m.render(back.turns, back.code, max_code_tokens=128)
    mask = np.asarray(seq.loss_mask, dtype=int)
    runs = int(np.sum(np.diff(np.concatenate([[0], mask, [0]])) == 1))
    assert runs == 5 and len(seq.answer_spans) == 5 and seq.dropped_turns == 0
    for (start, end), (_, answer) in zip(seq.answer_spans, back.turns):
        ids = seq.text_ids[start:end]
        assert small_tok.decode(ids, skip_special=True) == answer
    st = compute_stats(load_finetune_corpus(FIXTURES / "stats_four_codes.jsonl"), small_tok)
    assert (st.num_qas, st.mean_qas_per_code, st.max_qas_per_code, st.min_qas_per_code) == (8, 2.0, 3, 1)
    return "5 masked spans decode to the answers; stats (8, 2.0, 3, 1)"


# ---------------------------------------------------------------- 10. CLI determinism

CLI_TINY = {
    "model": {"vocab_size": 320, "enc_dim": 16, "enc_layers": 2, "enc_heads": 2, "llm_dim": 24, "proj_hidden": 32,
              "dec_layers": 2, "dec_heads": 2, "context_length": 256, "max_code_tokens": 128, "lora_rank": 4,
              "lora_alpha": 8.0},
    "tokenizer": {"vocab_size": 320},
    "pretrain": {"batch_size": 4, "lr": 1e-2, "epochs": 2},
    "finetune": {"batch_size": 4, "lr": 1e-2, "epochs": 2},
    "decode": {"max_new_tokens": 6},
}


@criterion(10, "determinism (repeated CLI runs reproduce loss series and MetricReport bit for bit)")
def test_c10_cli_determinism(tmp_path):
    write_jsonl(overfit_corpus(12), tmp_path / "train.jsonl")
    write_jsonl(overfit_corpus(4, seed=3), tmp_path / "test.jsonl")
    (tmp_path / "cfg.json").write_text(json.dumps(CLI_TINY))

    def run(*args, out):
        argv = [str(a) for a in args] + ["--config", str(tmp_path / "cfg.json"), "--seed", "11",
                                         "--out", str(out), "--no-figures"]
        assert cli_main(argv) == 0, argv

    outs = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        run("tokenizer-train", "--input", tmp_path / "train.jsonl", out=d / "tok")
        run("pretrain", "--corpus", tmp_path / "train.jsonl", "--tokenizer", d / "tok" / "tokenizer.json",
            out=d / "pre")
        run("finetune", "--corpus", tmp_path / "train.jsonl", "--checkpoint", d / "pre" / "pretrain.ckpt",
            out=d / "fine")
        run("evaluate", "--checkpoint", d / "fine" / "finetune.ckpt", "--corpus", tmp_path / "test.jsonl",
            out=d / "eval")
        outs.append(d)
    a, b = outs
    for stage in ("pre", "fine"):
        la = json.loads((a / stage / "train_report.json").read_text())["losses"]
        lb = json.loads((b / stage / "train_report.json").read_text())["losses"]
        assert la and la == lb, stage
        assert (a / stage / "loss.tsv").read_bytes() == (b / stage / "loss.tsv").read_bytes()
    assert (a / "eval" / "metrics.json").read_bytes() == (b / "eval" / "metrics.json").read_bytes()
    assert (a / "fine" / "finetune.ckpt").read_bytes() == (b / "fine" / "finetune.ckpt").read_bytes()
    n = len(json.loads((a / "fine" / "train_report.json").read_text())["losses"])
    return f"pretrain + finetune loss series ({n} finetune steps), checkpoint and MetricReport identical"

import numpy as np
import pytest

from vulqa.model import ModelConfig, VulQAModel
from vulqa.synthetic import code_snippets, corpus_texts, overfit_corpus
from vulqa.tokenizer import train_bpe

SMALL_VOCAB = 320


@pytest.fixture(scope="session")
def small_tok():
    texts = code_snippets(60) + corpus_texts(overfit_corpus(16))
    return train_bpe(texts, SMALL_VOCAB)


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=SMALL_VOCAB, enc_dim=16, enc_layers=2, enc_heads=2, llm_dim=24, proj_hidden=32,
                dec_layers=2, dec_heads=2, context_length=256, max_code_tokens=128, lora_rank=4,
                lora_alpha=8.0, dtype="float64", seed=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model(small_tok):
    return VulQAModel(tiny_config(), small_tok)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])

"""Encoder-only binary vulnerability classifier.

The code encoder is fine-tuned jointly with a linear head over mean-pooled
final-layer states. No decoder or projector weights are involved.
"""
from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import assign_arrays, read_checkpoint, write_checkpoint
from .errors import CheckpointFormatError, ConfigError, InputError
from .layers import Linear, Module
from .metrics import classification_metrics
from .model import CodeEncoder, ModelConfig, encode_code_ids
from .tokenizer import Tokenizer

THRESHOLD = 0.5


class ClassifierHead(Module):
    def __init__(self, enc_dim: int, seed: int = 0, dtype="float32", threshold: float = THRESHOLD):
        rng = np.random.default_rng([seed, 2])
        self.proj = Linear(enc_dim, 2, rng, np.dtype(dtype), std=0.02)
        self._threshold = threshold
        self.assign_names("head.")

    @property
    def threshold(self) -> float:
        return self._threshold

    def __call__(self, states: nx.Tensor, mask) -> nx.Tensor:
        """(B, T, d) encoder states -> (B, 2) logits."""
        return self.proj(nx.mean_pool(states, mask))


def new_encoder(cfg: ModelConfig) -> CodeEncoder:
    enc = CodeEncoder(cfg, np.random.default_rng(cfg.seed))
    enc.assign_names("encoder.")
    return enc


@dataclass
class ClassifierConfig:
    epochs: int = 3
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    max_code_tokens: int = 256
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown classifier config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassifierReport:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0
    trainable_parameters: int = 0
    class_counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def balance_corpus(samples: Sequence, seed: int = 0) -> list:
    """Downsample the majority class to the minority count, then shuffle."""
    pos = [s for s in samples if s.label == 1]
    neg = [s for s in samples if s.label == 0]
    if not pos or not neg:
        raise InputError("balance_corpus needs both classes present")
    rng = np.random.default_rng(seed)
    n = min(len(pos), len(neg))
    keep_pos = [pos[i] for i in sorted(rng.choice(len(pos), n, replace=False))]
    keep_neg = [neg[i] for i in sorted(rng.choice(len(neg), n, replace=False))]
    merged = keep_pos + keep_neg
    return [merged[i] for i in rng.permutation(len(merged))]


def _pad_codes(tokenizer: Tokenizer, codes: Sequence[str], max_tokens: int):
    seqs = [encode_code_ids(tokenizer, c, max_tokens) for c in codes]
    t = max(len(s) for s in seqs)
    ids = np.full((len(seqs), t), tokenizer.pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), t), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def _logits(encoder: CodeEncoder, head: ClassifierHead, ids, mask) -> nx.Tensor:
    return head(encoder.final(ids, mask), mask)


def train_classifier(encoder: CodeEncoder, head: ClassifierHead, corpus: Sequence, cfg: ClassifierConfig,
                     tokenizer: Tokenizer) -> ClassifierReport:
    """Jointly fine-tune encoder and head with two-way cross-entropy, in place."""
    if not corpus:
        raise InputError("empty classification corpus")
    params = list(encoder.parameters().values()) + list(head.parameters().values())
    for p in params:
        p.trainable = True
    opt = nx.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    report = ClassifierReport(trainable_parameters=int(sum(p.data.size for p in params)),
                              class_counts={str(k): int(sum(s.label == k for s in corpus)) for k in (0, 1)})
    limit = min(cfg.max_code_tokens, encoder.capacity)
    encoded = [(encode_code_ids(tokenizer, s.code, limit), s.label) for s in corpus]
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(encoded))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [encoded[i] for i in order[start:start + cfg.batch_size]]
            t = max(len(ids) for ids, _ in chunk)
            ids = np.full((len(chunk), t), tokenizer.pad_id, dtype=np.int64)
            mask = np.zeros((len(chunk), t), dtype=bool)
            for i, (seq, _) in enumerate(chunk):
                ids[i, :len(seq)] = seq
                mask[i, :len(seq)] = True
            labels = np.array([y for _, y in chunk])
            loss = nx.cross_entropy(_logits(encoder, head, ids, mask), labels, np.ones(len(chunk), bool))
            loss.backward()
            opt.step()
            opt.zero_grad()
            report.losses.append(float(loss.data))
            report.steps += 1
            if cfg.max_steps is not None and report.steps >= cfg.max_steps:
                break
        if cfg.max_steps is not None and report.steps >= cfg.max_steps:
            break
    report.wall_time = time.perf_counter() - t0
    return report


def predict_proba(encoder: CodeEncoder, head: ClassifierHead, codes: Sequence[str], tokenizer: Tokenizer,
                  max_code_tokens: int = 256, batch_size: int = 32) -> np.ndarray:
    """Positive-class probability for each code string."""
    out = []
    with nx.no_grad():
        for start in range(0, len(codes), batch_size):
            ids, mask = _pad_codes(tokenizer, codes[start:start + batch_size], min(max_code_tokens, encoder.capacity))
            z = _logits(encoder, head, ids, mask).data.astype(np.float64)
            z = z - z.max(axis=1, keepdims=True)
            p = np.exp(z)
            out.append(p[:, 1] / p.sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def classify(encoder: CodeEncoder, head: ClassifierHead, code: str, tokenizer: Tokenizer,
             max_code_tokens: int = 256) -> dict:
    if not code or not code.strip():
        raise InputError("empty code")
    p = float(predict_proba(encoder, head, [code], tokenizer, max_code_tokens)[0])
    return {"label": int(p >= head.threshold), "probability": p}


def evaluate_classifier(encoder, head, corpus: Sequence, tokenizer: Tokenizer,
                        max_code_tokens: int = 256) -> tuple[list[dict], dict]:
    """Predictions as ``{id, label, probability}`` rows plus accuracy/precision/recall/F1."""
    if not corpus:
        raise InputError("empty evaluation corpus")
    probs = predict_proba(encoder, head, [s.code for s in corpus], tokenizer, max_code_tokens)
    preds = [{"id": s.id, "label": int(p >= head.threshold), "probability": float(p)}
             for s, p in zip(corpus, probs)]
    metrics = classification_metrics([r["label"] for r in preds], [s.label for s in corpus])
    return preds, metrics


def encoder_from_model(model) -> CodeEncoder:
    """Copy of a multimodal model's code encoder, ready for classification fine-tuning."""
    enc = copy.deepcopy(model.encoder)
    enc.assign_names("encoder.")
    return enc


def save_classifier(encoder: CodeEncoder, head: ClassifierHead, tokenizer: Tokenizer, model_cfg: ModelConfig,
                    path, extra: dict | None = None):
    params = {p.name: p.data for p in list(encoder.parameters().values()) + list(head.parameters().values())}
    meta = {"kind": "classifier", "config": model_cfg.to_dict(), "threshold": head.threshold,
            "extra": extra or {}}
    return write_checkpoint(path, params, meta, tokenizer)


def load_classifier(path) -> tuple[CodeEncoder, ClassifierHead, Tokenizer, ModelConfig]:
    header, arrays, tokenizer = read_checkpoint(path)
    if header.get("kind") != "classifier":
        raise CheckpointFormatError(f"{path}: not a classifier checkpoint (kind={header.get('kind')!r})")
    if tokenizer is None:
        raise CheckpointFormatError(f"{path}: no tokenizer reference")
    cfg = ModelConfig.from_dict(header["config"])
    encoder = new_encoder(cfg)
    head = ClassifierHead(cfg.enc_dim, cfg.seed, cfg.dtype, header.get("threshold", THRESHOLD))
    live = {p.name: p for p in list(encoder.parameters().values()) + list(head.parameters().values())}
    assign_arrays(live, arrays)
    return encoder, head, tokenizer, cfg

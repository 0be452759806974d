"""Sentence-level generation metrics, a token-embedding similarity score,
binary classification metrics, and corpus evaluation.

Text is lowercased and split into word and punctuation tokens before any
lexical metric. Corpus scores are plain means of the per-row scores.
"""
from __future__ import annotations

import functools
import math
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, VulQAError

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5


def tokenize(text: str | Sequence[str]) -> list[str]:
    if isinstance(text, str):
        return _TOKEN_RE.findall(text.lower())
    return list(text)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


# ---------------------------------------------------------------- BLEU


def bleu_n(hypothesis, reference, n: int = 4) -> float:
    """Geometric mean of clipped 1..n-gram precisions times the brevity penalty.

    A zero match count for k >= 2 is smoothed to 1 / (candidates + 1).
    """
    if n < 1:
        raise InputError("n must be >= 1")
    hyp, ref = tokenize(hypothesis), tokenize(reference)
    if not hyp:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        h = _ngrams(hyp, k)
        r = _ngrams(ref, k)
        total = max(len(hyp) - k + 1, 0)
        matches = sum(min(c, r[g]) for g, c in h.items())
        if matches == 0:
            if k == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = matches / total
        log_sum += math.log(p)
    bp = math.exp(min(0.0, 1.0 - len(ref) / len(hyp)))
    return bp * math.exp(log_sum / n)


# ---------------------------------------------------------------- ROUGE


def rouge_n(hypothesis, reference, n: int = 1) -> float:
    hyp, ref = tokenize(hypothesis), tokenize(reference)
    h, r = _ngrams(hyp, n), _ngrams(ref, n)
    h_total, r_total = sum(h.values()), sum(r.values())
    if h_total == 0 or r_total == 0:
        return 0.0
    overlap = sum(min(c, r[g]) for g, c in h.items())
    return _f1(overlap / h_total, overlap / r_total)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, reference) -> float:
    hyp, ref = tokenize(hypothesis), tokenize(reference)
    if not hyp or not ref:
        return 0.0
    lcs = lcs_length(hyp, ref)
    return _f1(lcs / len(hyp), lcs / len(ref))


# ---------------------------------------------------------------- METEOR


class _SearchBudget(Exception):
    pass


def _greedy_alignment(hyp, ref) -> tuple[int, int]:
    used = set()
    pos = defaultdict(list)
    for j, w in enumerate(ref):
        pos[w].append(j)
    matches = chunks = 0
    prev = None
    for w in hyp:
        free = [j for j in pos.get(w, ()) if j not in used]
        if not free:
            prev = None
            continue
        j = prev + 1 if prev is not None and prev + 1 in free else free[0]
        used.add(j)
        matches += 1
        if prev is None or j != prev + 1:
            chunks += 1
        prev = j
    return matches, chunks


def meteor_alignment(hyp: Sequence[str], ref: Sequence[str], budget: int = 200_000) -> tuple[int, int]:
    """(matches, chunks) of the exact-match alignment with most matches, then fewest chunks.

    Exhaustive memoised search; falls back to a greedy alignment when the
    state space exceeds ``budget`` (only reachable with long runs of
    repeated words).
    """
    hc, rc = Counter(hyp), Counter(ref)
    need = {w: min(hc[w], rc[w]) for w in hc}
    target = sum(need.values())
    if target == 0:
        return 0, 0
    pos = defaultdict(list)
    for j, w in enumerate(ref):
        pos[w].append(j)
    remaining_after = []
    seen: Counter = Counter()
    for w in reversed(hyp):
        seen[w] += 1
        remaining_after.append(seen[w])
    remaining_after.reverse()  # occurrences of hyp[i] at positions >= i
    n = len(hyp)
    calls = [0]

    @functools.lru_cache(maxsize=None)
    def best(i: int, used: int, prev: int) -> int:
        """Fewest chunks for hyp[i:] given used ref positions; prev = ref pos matched at i-1 or -1."""
        calls[0] += 1
        if calls[0] > budget:
            raise _SearchBudget
        if i == n:
            return 0
        w = hyp[i]
        done = sum(1 for j in pos.get(w, ()) if used >> j & 1)
        still = need.get(w, 0) - done
        options = []
        if still > 0:
            for j in pos[w]:
                if not used >> j & 1:
                    options.append((0 if prev >= 0 and j == prev + 1 else 1) + best(i + 1, used | (1 << j), j))
        if still < remaining_after[i]:
            options.append(best(i + 1, used, -1))
        return min(options)

    try:
        chunks = best(0, 0, -1)
    except _SearchBudget:
        return _greedy_alignment(hyp, ref)
    finally:
        best.cache_clear()
    return target, chunks


def meteor(hypothesis, reference, alpha: float = METEOR_ALPHA, beta: float = METEOR_BETA,
           gamma: float = METEOR_GAMMA) -> float:
    """Exact-match METEOR: recall-weighted harmonic mean times fragmentation penalty."""
    hyp, ref = tokenize(hypothesis), tokenize(reference)
    if not hyp or not ref:
        return 0.0
    m, chunks = meteor_alignment(hyp, ref)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (chunks / m) ** beta
    return f_mean * (1 - penalty)


# ---------------------------------------------------------------- semantic


class TokenEmbedder:
    """Embeds text as rows of a token-embedding table (default: the decoder's)."""

    def __init__(self, tokenizer, table: np.ndarray):
        self.tokenizer = tokenizer
        self.table = np.asarray(table, dtype=np.float64)

    @classmethod
    def from_model(cls, model) -> "TokenEmbedder":
        return cls(model.tokenizer, model.decoder.tok_emb.data)

    def __call__(self, text: str) -> np.ndarray:
        ids = self.tokenizer.encode(text)
        return self.table[ids] if ids else np.zeros((0, self.table.shape[1]))


def semantic_score(hypothesis, reference, embedder: Callable[[str], np.ndarray]) -> float:
    """Greedy max-cosine token matching F1, clamped to [0, 1]."""
    h = np.asarray(embedder(hypothesis), dtype=np.float64)
    r = np.asarray(embedder(reference), dtype=np.float64)
    if h.size == 0 or r.size == 0:
        return 0.0
    hn = h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
    rn = r / np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)
    sim = hn @ rn.T
    p = float(np.clip(sim.max(axis=1).mean(), 0.0, 1.0))
    rec = float(np.clip(sim.max(axis=0).mean(), 0.0, 1.0))
    return float(min(max(_f1(p, rec), 0.0), 1.0))


# ---------------------------------------------------------------- classification


def classification_metrics(predictions: Sequence[int], labels: Sequence[int]) -> dict[str, float]:
    """Accuracy, precision, recall, F1 with label 1 (vulnerable) as positive."""
    if len(predictions) == 0:
        raise InputError("no predictions")
    if len(predictions) != len(labels):
        raise InputError("predictions and labels differ in length")
    pred = np.asarray(predictions)
    gold = np.asarray(labels)
    if not set(np.unique(pred)) <= {0, 1} or not set(np.unique(gold)) <= {0, 1}:
        raise InputError("labels must be binary 0/1")
    tp = int(((pred == 1) & (gold == 1)).sum())
    fp = int(((pred == 1) & (gold == 0)).sum())
    fn = int(((pred == 0) & (gold == 1)).sum())
    tn = int(((pred == 0) & (gold == 0)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {"accuracy": (tp + tn) / len(pred), "precision": precision, "recall": recall,
            "f1": _f1(precision, recall)}


# ---------------------------------------------------------------- reports

METRIC_COLUMNS = (
    ("bleu2", "BLEU 2"), ("bleu4", "BLEU 4"), ("rouge1", "ROUGE 1"), ("rouge2", "ROUGE 2"),
    ("rougeL", "ROUGE L"), ("meteor", "METEOR"), ("semantic_score", "SemScore"),
)


def score_pair(hypothesis: str, reference: str, embedder=None) -> dict[str, float]:
    row = {
        "bleu2": bleu_n(hypothesis, reference, 2),
        "bleu4": bleu_n(hypothesis, reference, 4),
        "rouge1": rouge_n(hypothesis, reference, 1),
        "rouge2": rouge_n(hypothesis, reference, 2),
        "rougeL": rouge_l(hypothesis, reference),
        "meteor": meteor(hypothesis, reference),
    }
    row["semantic_score"] = semantic_score(hypothesis, reference, embedder) if embedder is not None else 0.0
    return row


@dataclass
class MetricReport:
    bleu2: float
    bleu4: float
    rouge1: float
    rouge2: float
    rougeL: float
    meteor: float
    semantic_score: float
    n: int
    skipped: int = 0
    rows: list[dict] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: list[dict], skipped: int = 0) -> "MetricReport":
        if not rows:
            raise InputError("no scored rows to aggregate")
        means = {key: float(np.mean([r[key] for r in rows])) for key, _ in METRIC_COLUMNS}
        return cls(**means, n=len(rows), skipped=skipped, rows=rows)

    def to_json(self, include_rows: bool = False) -> dict:
        d = asdict(self)
        if not include_rows:
            d.pop("rows")
        return d

    def values(self) -> dict[str, float]:
        return {key: getattr(self, key) for key, _ in METRIC_COLUMNS}


def format_table(reports: dict[str, MetricReport]) -> str:
    """Aligned text table, one row per named report, BLEU-2 .. semantic columns."""
    name_w = max([len("Model")] + [len(n) for n in reports])
    header = f"{'Model':<{name_w}}  " + "  ".join(f"{label:>8}" for _, label in METRIC_COLUMNS)
    lines = [header]
    for name, rep in reports.items():
        lines.append(f"{name:<{name_w}}  " + "  ".join(f"{getattr(rep, key):>8.3f}" for key, _ in METRIC_COLUMNS))
    return "\n".join(lines)


def evaluate_corpus(model, test_set, decode_config=None, embedder=None,
                    generate_fn: Callable | None = None) -> MetricReport:
    """Generate an answer for every (code, question) turn and average the scores."""
    from .model import generate

    if not test_set:
        raise InputError("empty test set")
    gen = generate_fn or (lambda code, q: generate(model, code, q, decode_config))
    if embedder is None and model is not None:
        embedder = TokenEmbedder.from_model(model)
    rows = []
    skipped = 0
    for sample in test_set:
        for ti, (q, a) in enumerate(sample.turns):
            try:
                hyp = gen(sample.code, q)
            except VulQAError:
                skipped += 1
                continue
            row = score_pair(hyp, a, embedder)
            row.update(id=sample.id, turn=ti, hypothesis=hyp, reference=a)
            rows.append(row)
    return MetricReport.from_rows(rows, skipped=skipped)

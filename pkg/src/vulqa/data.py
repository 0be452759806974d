"""Conversation corpora: schema, JSONL I/O, pretraining conversion, stats, splits."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, StatsError, ValidationError

log = logging.getLogger(__name__)

PRETRAIN_QUESTION = "Summarize the purpose of this script."
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.9, 0.05, 0.05)
CVE_RE = re.compile(r"CVE-\d{4}-\d{4,}")


@dataclass
class ConversationSample:
    id: str
    language: str
    code: str
    description: str | None = None
    turns: list[tuple[str, str]] = field(default_factory=list)
    split: str | None = None

    def __post_init__(self):
        self.turns = [tuple(t) for t in self.turns]

    def validate(self) -> None:
        if not self.id:
            raise ValidationError("sample id is empty")
        if not self.code:
            raise ValidationError(f"{self.id}: empty code")
        if not self.turns:
            raise ValidationError(f"{self.id}: no turns")
        for i, (q, a) in enumerate(self.turns):
            if not q or not q.strip():
                raise ValidationError(f"{self.id}: turn {i} has an empty question")
            if not a or not a.strip():
                raise ValidationError(f"{self.id}: turn {i} has an empty answer")
        if self.split is not None and self.split not in SPLITS:
            raise ValidationError(f"{self.id}: unknown split {self.split!r}")

    @property
    def cve_id(self) -> str | None:
        """CVE identifier embedded in the id (e.g. ``CVE-2018-1000039/pdf-cmap.c``)."""
        m = CVE_RE.search(self.id or "")
        return m.group(0) if m else None

    def to_json(self) -> dict:
        d = {"id": self.id, "language": self.language, "code": self.code,
             "description": self.description, "turns": [{"q": q, "a": a} for q, a in self.turns]}
        if self.split is not None:
            d["split"] = self.split
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ConversationSample":
        missing = [k for k in ("id", "code", "turns") if k not in obj]
        if missing:
            raise ValidationError(f"missing fields {missing}")
        turns = []
        for t in obj["turns"]:
            if not isinstance(t, dict) or "q" not in t or "a" not in t:
                raise ValidationError("each turn must be an object with 'q' and 'a'")
            turns.append((t["q"], t["a"]))
        return cls(id=str(obj["id"]), language=obj.get("language", ""), code=obj["code"],
                   description=obj.get("description"), turns=turns, split=obj.get("split"))


@dataclass
class LabeledCode:
    """Classification record: same schema with ``label`` replacing ``turns``."""
    id: str
    language: str
    code: str
    label: int
    description: str | None = None
    split: str | None = None

    def validate(self) -> None:
        if not self.id or not self.code:
            raise ValidationError("labelled record needs id and code")
        if self.label not in (0, 1):
            raise ValidationError(f"{self.id}: label must be 0 or 1")

    def to_json(self) -> dict:
        d = {"id": self.id, "language": self.language, "code": self.code,
             "description": self.description, "label": self.label}
        if self.split is not None:
            d["split"] = self.split
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "LabeledCode":
        if "id" not in obj or "code" not in obj or "label" not in obj:
            raise ValidationError("labelled record needs id, code and label")
        return cls(id=str(obj["id"]), language=obj.get("language", ""), code=obj["code"],
                   label=int(obj["label"]), description=obj.get("description"), split=obj.get("split"))


# ---------------------------------------------------------------- I/O


def _read_jsonl(path, factory):
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("record is not a JSON object", line=lineno)
            try:
                rec = factory(obj)
                rec.validate()
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
            if rec.id in seen:
                raise ValidationError(f"line {lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def load_finetune_corpus(path) -> list[ConversationSample]:
    return _read_jsonl(path, ConversationSample.from_json)


def load_labeled_corpus(path) -> list[LabeledCode]:
    return _read_jsonl(path, LabeledCode.from_json)


def write_jsonl(records: Iterable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json() if hasattr(r, "to_json") else r, ensure_ascii=False) + "\n")


def read_pairs(path) -> list[dict]:
    """Code-summary pairs: one JSON object per line with ``code`` and ``summary``."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    pairs.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ParseError(f"malformed JSON: {exc.msg}", line=lineno) from None
    return pairs


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainBuild:
    samples: list[ConversationSample]
    skipped: int


def build_pretrain_corpus(pairs: Iterable) -> PretrainBuild:
    """One single-turn sample per code-summary pair; empty summaries are skipped."""
    samples = []
    skipped = 0
    for i, pair in enumerate(pairs):
        if isinstance(pair, dict):
            code, summary = pair.get("code", ""), pair.get("summary", "")
            pid, lang = pair.get("id", f"pt-{i}"), pair.get("language", "")
        else:
            code, summary = pair
            pid, lang = f"pt-{i}", ""
        if not summary or not summary.strip() or not code:
            skipped += 1
            continue
        samples.append(ConversationSample(id=str(pid), language=lang, code=code, description=None,
                                          turns=[(PRETRAIN_QUESTION, summary.strip())]))
    if skipped:
        log.warning("skipped %d pretraining pairs with empty summary or code", skipped)
    return PretrainBuild(samples, skipped)


# ---------------------------------------------------------------- statistics


@dataclass
class DatasetStats:
    num_codes: int
    num_cves: int
    num_qas: int
    max_qas_per_code: int
    min_qas_per_code: int
    mean_qas_per_code: float
    total_tokens: int
    max_tokens_per_code: int
    min_tokens_per_code: int
    mean_tokens_per_code: float

    def to_json(self) -> dict:
        return asdict(self)

    ROWS = (
        ("# codes", "num_codes"), ("# CVEs", "num_cves"), ("# QAs", "num_qas"),
        ("max # QAs per code", "max_qas_per_code"), ("min # QAs per code", "min_qas_per_code"),
        ("mean # QAs per code", "mean_qas_per_code"), ("# tokens", "total_tokens"),
        ("max # tokens per code", "max_tokens_per_code"), ("min # tokens per code", "min_tokens_per_code"),
        ("mean # tokens per code", "mean_tokens_per_code"),
    )

    def to_table(self, title: str = "Dataset") -> str:
        width = max(len(label) for label, _ in self.ROWS)
        lines = [f"{title:<{width}}  value"]
        for label, attr in self.ROWS:
            v = getattr(self, attr)
            cell = f"{v:.2f}" if isinstance(v, float) else str(v)
            if attr == "num_cves" and v == 0:
                cell = "-"
            lines.append(f"{label:<{width}}  {cell}")
        return "\n".join(lines)


def compute_stats(corpus: Sequence[ConversationSample], tokenizer) -> DatasetStats:
    if not corpus:
        raise StatsError("cannot compute statistics of an empty corpus")
    qas = [len(s.turns) for s in corpus]
    toks = [len(tokenizer.encode(s.code)) for s in corpus]
    cves = {s.cve_id for s in corpus if s.cve_id}
    return DatasetStats(
        num_codes=len(corpus), num_cves=len(cves), num_qas=sum(qas),
        max_qas_per_code=max(qas), min_qas_per_code=min(qas), mean_qas_per_code=sum(qas) / len(qas),
        total_tokens=sum(toks), max_tokens_per_code=max(toks), min_tokens_per_code=min(toks),
        mean_tokens_per_code=sum(toks) / len(toks),
    )


# ---------------------------------------------------------------- splits


def _code_key(sample) -> str:
    return hashlib.sha1(sample.code.encode("utf-8")).hexdigest()


def split_corpus(corpus: Sequence, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> dict[str, str]:
    """Assign every sample id to a split; identical code never straddles splits.

    Groups of identical code are shuffled with ``seed`` and cut at the
    cumulative ratio boundaries measured in samples.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    groups: dict[str, list] = {}
    for s in corpus:
        groups.setdefault(_code_key(s), []).append(s)
    keys = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    total = len(corpus)
    bounds = [ratios[0] * total, (ratios[0] + ratios[1]) * total]
    assignment: dict[str, str] = {}
    placed = 0
    for idx in order:
        members = groups[keys[idx]]
        mid = placed + len(members) / 2.0
        name = "train" if mid <= bounds[0] and ratios[0] > 0 else (
            "val" if mid <= bounds[1] and ratios[1] > 0 else "test")
        if ratios[2] == 0 and name == "test":
            name = "val" if ratios[1] > 0 else "train"
        for s in members:
            assignment[s.id] = name
        placed += len(members)
    return assignment


def apply_split(corpus: Sequence[ConversationSample], assignment: dict[str, str]) -> dict[str, list]:
    out = {name: [] for name in SPLITS}
    for s in corpus:
        out[assignment[s.id]].append(s)
    return out

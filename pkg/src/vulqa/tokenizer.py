"""Byte-level BPE shared by the code and text streams.

Ids 0..255 are raw bytes, learned merges follow in rank order, and the six
special tokens occupy the top of the vocabulary. Ids between the last merge
and the first special (only present when training ran out of pairs) are
reserved and never produced.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, DecodeError, TokenizerTrainingError

FORMAT_VERSION = 1
SPECIAL_NAMES = ("PAD", "BOS", "EOS", "CODE_SLOT", "HUMAN", "ASSISTANT")
DEFAULT_VOCAB_SIZE = 512


def _to_bytes(text) -> bytes:
    if isinstance(text, (bytes, bytearray)):
        return bytes(text)
    return str(text).encode("utf-8")


def _merge_seq(seq: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i, n = 0, len(seq)
    a, b = pair
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


class Tokenizer:
    def __init__(self, merges: Sequence[tuple[int, int]], vocab_size: int):
        n_learned = 256 + len(merges)
        if vocab_size < n_learned + len(SPECIAL_NAMES):
            raise ConfigError(f"vocab_size {vocab_size} too small for {len(merges)} merges")
        self.merges = [tuple(m) for m in merges]
        self.vocab_size = vocab_size
        self.ranks = {pair: 256 + i for i, pair in enumerate(self.merges)}
        first_special = vocab_size - len(SPECIAL_NAMES)
        self.specials = {name: first_special + i for i, name in enumerate(SPECIAL_NAMES)}
        self._special_ids = {v: k for k, v in self.specials.items()}
        self.n_learned = n_learned
        self._bytes: list[bytes] = [bytes([i]) for i in range(256)]
        for a, b in self.merges:
            self._bytes.append(self._bytes[a] + self._bytes[b])

    # special-token accessors used throughout the model code
    @property
    def pad_id(self) -> int:
        return self.specials["PAD"]

    @property
    def bos_id(self) -> int:
        return self.specials["BOS"]

    @property
    def eos_id(self) -> int:
        return self.specials["EOS"]

    @property
    def code_slot_id(self) -> int:
        return self.specials["CODE_SLOT"]

    @property
    def human_id(self) -> int:
        return self.specials["HUMAN"]

    @property
    def assistant_id(self) -> int:
        return self.specials["ASSISTANT"]

    def is_special(self, token_id: int) -> bool:
        return token_id in self._special_ids

    def encode(self, text) -> list[int]:
        seq = list(_to_bytes(text))
        ranks = self.ranks
        while len(seq) > 1:
            best = None
            for pair in zip(seq, seq[1:]):
                r = ranks.get(pair)
                if r is not None and (best is None or r < best[0]):
                    best = (r, pair)
            if best is None:
                break
            seq = _merge_seq(seq, best[1], best[0])
        return seq

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        parts = []
        for i in ids:
            i = int(i)
            if 0 <= i < self.n_learned:
                parts.append(self._bytes[i])
            elif i in self._special_ids:
                parts.append(f"<|{self._special_ids[i].lower()}|>".encode())
            else:
                raise DecodeError(f"unknown token id {i}")
        return b"".join(parts)

    def decode(self, ids: Iterable[int], skip_special: bool = False) -> str:
        if skip_special:
            ids = [i for i in ids if int(i) not in self._special_ids]
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def to_json(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "vocab_size": self.vocab_size,
            "merges": [list(m) for m in self.merges],
            "specials": dict(self.specials),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Tokenizer":
        if obj.get("version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported tokenizer version {obj.get('version')!r}")
        tok = cls([tuple(m) for m in obj["merges"]], int(obj["vocab_size"]))
        if obj.get("specials") and dict(obj["specials"]) != tok.specials:
            raise ConfigError("special-token ids in file disagree with vocab layout")
        return tok

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls.from_json(json.loads(Path(path).read_text()))


def train_bpe(corpus: Iterable, vocab_size: int = DEFAULT_VOCAB_SIZE, min_frequency: int = 2) -> Tokenizer:
    """Greedy BPE: most frequent pair first, ties to the smallest (left, right) ids."""
    if vocab_size <= 256 + len(SPECIAL_NAMES):
        raise ConfigError(f"vocab_size must exceed {256 + len(SPECIAL_NAMES)}")
    counts = Counter(_to_bytes(s) for s in corpus)
    counts.pop(b"", None)
    if not counts:
        raise TokenizerTrainingError("empty corpus")
    words = [list(w) for w in counts]
    freqs = list(counts.values())

    pair_counts: Counter = Counter()
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for wi, w in enumerate(words):
        for pair in zip(w, w[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)

    merges: list[tuple[int, int]] = []
    n_merges = vocab_size - 256 - len(SPECIAL_NAMES)
    while len(merges) < n_merges and pair_counts:
        pair, count = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if count < min_frequency:
            break
        new_id = 256 + len(merges)
        merges.append(pair)
        for wi in sorted(where.pop(pair, ())):
            old = words[wi]
            new = _merge_seq(old, pair, new_id)
            f = freqs[wi]
            for p in zip(old, old[1:]):
                pair_counts[p] -= f
                if pair_counts[p] <= 0:
                    del pair_counts[p]
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                where[p].add(wi)
            words[wi] = new
        pair_counts.pop(pair, None)
    return Tokenizer(merges, vocab_size)

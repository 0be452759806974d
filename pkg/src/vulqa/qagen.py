"""Turn (code, vulnerability description) records into multi-turn QA samples.

Two generator clients share one interface, ``complete(prompt) -> str``:
an HTTP client for a text-generation service and a deterministic offline
template generator used for hermetic runs.
"""
from __future__ import annotations

import json
import logging
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence

from .data import ConversationSample
from .errors import GenerationFailure, ValidationError

log = logging.getLogger(__name__)

SYSTEM_INSTRUCTION = (
    "You are simulating a conversation between a human and an assistant about the source code "
    "and the vulnerability description below. Write questions a security reviewer would ask and "
    "the assistant's answers, covering what the program does, the vulnerability location, fix, "
    "mechanism of action, and severity. Use only facts stated in the code or the description; "
    "do not add any information that is not present in them."
)
FORMAT_CONTRACT = (
    "Format every question on a line starting with 'Q:' and every answer on a line starting "
    "with 'A:', alternating, with no other text."
)

TEMPLATE_QUESTIONS = (
    ("vulnerability", "What is the vulnerability in this code?"),
    ("location", "Where in the code is the vulnerability located?"),
    ("mechanism", "What is the mechanism of action for this vulnerability?"),
    ("fix", "How can this vulnerability be fixed?"),
    ("severity", "What is the severity of this vulnerability?"),
    ("semantics", "What does this code do?"),
)


@dataclass(frozen=True)
class GenerationPrompt:
    system: str
    code: str
    description: str
    contract: str = FORMAT_CONTRACT

    @property
    def text(self) -> str:
        return (f"{self.system}\n\n{self.contract}\n\n### Code\n{self.code}\n\n"
                f"### Vulnerability description\n{self.description}\n")


def build_generation_prompt(code: str, description: str) -> GenerationPrompt:
    if not code or not code.strip():
        raise ValidationError("empty code")
    if not description or not description.strip():
        raise ValidationError("empty description")
    return GenerationPrompt(SYSTEM_INSTRUCTION, code, description)


# ---------------------------------------------------------------- parsing

_LINE_RE = re.compile(r"^\s*(Q|A)\s*\d*\s*:\s?(.*)$")


@dataclass
class ParseResult:
    pairs: list[tuple[str, str]]
    dropped_questions: int = 0


def parse_conversation(raw_text: str, strict: bool = True) -> ParseResult:
    """Greedy scan for alternating ``Q:`` / ``A:`` blocks.

    Continuation lines attach to the open block. A question followed by
    another question is dropped, as is a trailing unanswered question.
    """
    pairs: list[tuple[str, str]] = []
    dropped = 0
    kind = None
    buf: list[str] = []
    question = None

    def flush():
        nonlocal question, dropped
        text = " ".join(x.strip() for x in buf if x.strip()).strip()
        if kind == "Q":
            if question is not None:
                dropped += 1
            question = text or None
        elif kind == "A" and question is not None and text:
            pairs.append((question, text))
            question = None

    for line in raw_text.splitlines():
        m = _LINE_RE.match(line)
        if m:
            flush()
            kind, buf = m.group(1), [m.group(2)]
        elif kind is not None:
            buf.append(line)
    flush()
    if question is not None:
        dropped += 1
    if dropped:
        log.warning("dropped %d unanswered question(s)", dropped)
    if strict and not pairs:
        raise GenerationFailure("no complete question/answer pair in generator output")
    return ParseResult(pairs, dropped)


# ---------------------------------------------------------------- clients


class GeneratorClient(Protocol):
    def complete(self, prompt: GenerationPrompt) -> str: ...


_SENT_RE = re.compile(r"(?<=[.!?])\s+")
_FUNC_RE = re.compile(r"\b([A-Za-z_]\w*)\s*\(")
_C_KEYWORDS = {"if", "for", "while", "switch", "return", "sizeof", "catch", "function"}


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENT_RE.split(text.strip()) if s.strip()]


class OfflineTemplateClient:
    """Deterministic stand-in for an LLM: answers are sliced from the inputs."""

    def complete(self, prompt: GenerationPrompt) -> str:
        sents = _sentences(prompt.description)
        funcs = [f for f in _FUNC_RE.findall(prompt.code) if f not in _C_KEYWORDS]

        def find(*words, skip_first=False):
            for s in (sents[1:] if skip_first and len(sents) > 1 else sents):
                low = s.lower()
                if any(w in low for w in words):
                    return s
            return None

        answers = {
            "vulnerability": sents[0] if sents else None,
            "location": (f"The vulnerability is located in the {funcs[0]} function." if funcs else None),
            "mechanism": sents[1] if len(sents) > 1 else None,
            # the first sentence names the flaw ("out of bounds"), so look for remedies after it
            "fix": find("fix", "patch", "check", "validat", "sanitiz", "bound", skip_first=True),
            "severity": find("attack", "crash", "denial", "arbitrary", "remote", "sever", "execute"),
            "semantics": (f"The code defines {', '.join(dict.fromkeys(funcs[:3]))}." if funcs else None),
        }
        lines = []
        for key, question in TEMPLATE_QUESTIONS:
            if answers[key]:
                lines += [f"Q: {question}", f"A: {answers[key]}"]
        return "\n".join(lines)


class HttpGeneratorClient:
    """POST {"prompt", "max_tokens", "temperature"} and read {"text"}."""

    def __init__(self, endpoint: str, timeout: float = 60.0, retries: int = 2, max_tokens: int = 1024,
                 temperature: float = 0.2, backoff: float = 0.5):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.backoff = backoff
        self._local = threading.local()

    @property
    def last_attempts(self) -> int:
        """Attempts used by this thread's most recent ``complete`` call."""
        return getattr(self._local, "attempts", 0)

    def complete(self, prompt: GenerationPrompt) -> str:
        body = json.dumps({"prompt": prompt.text, "max_tokens": self.max_tokens,
                           "temperature": self.temperature}).encode()
        last = None
        for attempt in range(self.retries + 1):
            self._local.attempts = attempt + 1
            req = urllib.request.Request(self.endpoint, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
                    raise GenerationFailure("response lacks a string 'text' field")
                return payload["text"]
            except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError, GenerationFailure) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise GenerationFailure(f"generator unreachable after {self.retries + 1} attempts: {last}")


# ---------------------------------------------------------------- pipeline


@dataclass
class QARecord:
    id: str
    language: str
    code: str
    description: str | None

    @classmethod
    def from_json(cls, obj: dict) -> "QARecord":
        return cls(str(obj["id"]), obj.get("language", ""), obj.get("code", ""), obj.get("description"))


@dataclass
class GenerationReport:
    records: int = 0
    succeeded: int = 0
    skipped: int = 0
    failed: int = 0
    retries: int = 0
    dropped_questions: int = 0
    mean_grounding: float = 0.0
    failures: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def grounding_overlap(answer: str, code: str, description: str, n: int = 2) -> float:
    """Fraction of answer word n-grams that also occur in code + description."""
    words = re.findall(r"\w+", answer.lower())
    source = re.findall(r"\w+", f"{code} {description}".lower())
    grams = [tuple(words[i:i + n]) for i in range(len(words) - n + 1)]
    if not grams:
        return 0.0
    have = {tuple(source[i:i + n]) for i in range(len(source) - n + 1)}
    return sum(g in have for g in grams) / len(grams)


def generate_dataset(records: Iterable, client: GeneratorClient, per_record_turn_cap: int | None = None,
                     parallelism: int = 1, writer=None) -> tuple[list[ConversationSample], GenerationReport]:
    """Generate, parse and validate one sample per record; failures never abort the run.

    ``writer`` (optional) is called with each accepted sample under a lock,
    in completion order; the returned list is in input order.
    """
    recs = [r if isinstance(r, QARecord) else QARecord.from_json(r) for r in records]
    report = GenerationReport(records=len(recs))
    lock = threading.Lock()
    results: list[ConversationSample | None] = [None] * len(recs)
    grounding: list[float] = []

    def work(i: int, rec: QARecord):
        try:
            prompt = build_generation_prompt(rec.code, rec.description or "")
        except ValidationError as exc:
            with lock:
                report.skipped += 1
                report.failures.append({"id": rec.id, "reason": str(exc)})
            return
        try:
            raw = client.complete(prompt)
            parsed = parse_conversation(raw)
            pairs = parsed.pairs[:per_record_turn_cap] if per_record_turn_cap else parsed.pairs
            sample = ConversationSample(id=rec.id, language=rec.language, code=rec.code,
                                        description=rec.description, turns=pairs)
            sample.validate()
        except (GenerationFailure, ValidationError) as exc:
            with lock:
                report.failed += 1
                report.failures.append({"id": rec.id, "reason": str(exc)})
            return
        finally:
            used = getattr(client, "last_attempts", 1)
            if used > 1:
                with lock:
                    report.retries += used - 1
        g = [grounding_overlap(a, rec.code, rec.description or "") for _, a in sample.turns]
        with lock:
            results[i] = sample
            report.succeeded += 1
            report.dropped_questions += parsed.dropped_questions
            grounding.extend(g)
            if writer is not None:
                writer(sample)

    if parallelism <= 1:
        for i, rec in enumerate(recs):
            work(i, rec)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            list(pool.map(lambda ir: work(*ir), enumerate(recs)))
    report.mean_grounding = sum(grounding) / len(grounding) if grounding else 0.0
    return [s for s in results if s is not None], report

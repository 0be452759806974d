"""Deterministic synthetic corpora for smoke runs, ablations and tests."""
from __future__ import annotations

import numpy as np

from .data import ConversationSample, LabeledCode

VULN_CALLS = [
    ("strcpy(dst, src);", "buffer overflow", "strcpy"),
    ("free(ptr); ptr->len = 0;", "use after free", "free"),
    ("system(cmd);", "command injection", "system"),
    ("printf(user_fmt);", "format string bug", "printf"),
    ("gets(line);", "unbounded read", "gets"),
    ("memcpy(out, in, n);", "heap overflow", "memcpy"),
    ("sprintf(path, \"%s\", name);", "path overflow", "sprintf"),
    ("atoi(count) * size;", "integer overflow", "atoi"),
]
FUNC_NAMES = ["parse_header", "read_block", "load_page", "add_range"]
QUESTIONS = [
    "What is the vulnerability in this code?",
    "Where in the code is the vulnerability located?",
    "How can this vulnerability be fixed?",
    "What is the severity of this vulnerability?",
]


def overfit_corpus(n: int = 32, seed: int = 0) -> list[ConversationSample]:
    """Single-turn QA samples whose answer is determined by the code."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        call, kind, fn_call = VULN_CALLS[i % len(VULN_CALLS)]
        func = FUNC_NAMES[(i // len(VULN_CALLS)) % len(FUNC_NAMES)]
        arg = int(rng.integers(2, 9))
        code = f"int {func}(char *src, int n) {{\n  char dst[{arg * 8}];\n  {call}\n  return n;\n}}\n"
        out.append(ConversationSample(
            id=f"SYN-{i:03d}", language="C", code=code, description=None,
            turns=[("What is the vulnerability in this code?", f"A {kind} in {func} via {fn_call}.")],
        ))
    return out


KEY_CALLS = [("gets", "unbounded read"), ("system", "command injection"),
             ("strcpy", "buffer overflow"), ("free", "use after free")]

_FILLER_WORDS = ["int", "len", "buf", "idx", "ret", "tmp", "val", "ptr", "cnt", "off"]


def _filler(rng, n_lines: int) -> str:
    lines = []
    for _ in range(n_lines):
        a, b = rng.choice(_FILLER_WORDS, 2, replace=False)
        lines.append(f"  {a}{int(rng.integers(0, 10))} = {b} + {int(rng.integers(10, 100))};")
    return "\n".join(lines)


def position_corpus(n: int, seed: int = 0, prefix_lines: int = 40, varied_lines: int = 3) -> list[ConversationSample]:
    """Answer depends only on a call placed after a long shared prefix.

    The prefix is identical across every sample (fixed seed), so any model
    that sees only the first ~100 code tokens sees the same input for all
    classes. A few varied filler lines precede the key call.
    """
    prefix = _filler(np.random.default_rng(12345), prefix_lines)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        call, kind = KEY_CALLS[i % len(KEY_CALLS)]
        varied = _filler(rng, varied_lines)
        code = f"void handler(char *p) {{\n{prefix}\n{varied}\n  {call}(p);\n}}\n"
        out.append(ConversationSample(
            id=f"POS-{seed}-{i:03d}", language="C", code=code, description=None,
            turns=[("What is the vulnerability in this code?", f"It is {kind}.")],
        ))
    return out


MARKER = "gets(input);"
_SAFE_STMTS = [
    "n = strlen(s);", "if (n > max) return -1;", "memset(buf, 0, sizeof buf);",
    "for (i = 0; i < n; i++) sum += a[i];", "fclose(fp);", "x = y * 2 + z;",
    "snprintf(out, sizeof out, \"%d\", v);", "ptr = calloc(n, 4);", "return sum;",
    "while (len--) *d++ = *s++;", "assert(ptr != NULL);", "ok = check(v);",
]


def marker_corpus(n: int, seed: int = 0) -> list[LabeledCode]:
    """Functions labelled vulnerable exactly when they contain ``MARKER``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        stmts = list(rng.choice(_SAFE_STMTS, int(rng.integers(3, 7))))
        label = int(i % 2)
        if label:
            stmts.insert(int(rng.integers(0, len(stmts) + 1)), MARKER)
        code = "int f%d(char *s) {\n  %s\n}\n" % (i, "\n  ".join(stmts))
        out.append(LabeledCode(id=f"MRK-{seed}-{i:04d}", language="C", code=code, label=label))
    return out


def code_snippets(n: int = 100, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    snippets = []
    for i in range(n):
        stmts = list(rng.choice(_SAFE_STMTS + [c for c, _, _ in VULN_CALLS], int(rng.integers(2, 8))))
        snippets.append("static int fn_%d(void) {\n  %s\n}\n" % (i, "\n  ".join(stmts)))
    return snippets


def corpus_texts(samples) -> list[str]:
    """Every string a tokenizer should see from a corpus."""
    texts = []
    for s in samples:
        texts.append(s.code)
        for q, a in getattr(s, "turns", ()):
            texts.extend([q, a])
    return texts

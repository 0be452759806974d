"""Binary checkpoint format.

Layout: 8-byte magic ``LLVLCKPT``, u32 version, u64 header length, UTF-8
JSON header ``{"params": {name: {dtype, shape, offset, nbytes}}, ...}``,
then the raw little-endian parameter payload. The tokenizer JSON is written
next to the checkpoint as ``<file>.tokenizer.json`` and pinned by hash.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import (CheckpointFormatError, CheckpointShapeError, CheckpointTruncatedError,
                     CheckpointVersionError, MissingCheckpointError)
from .tokenizer import Tokenizer

MAGIC = b"LLVLCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def tokenizer_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".tokenizer.json")


def write_checkpoint(path, params: dict[str, np.ndarray], meta: dict, tokenizer: Tokenizer | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    blobs = []
    offset = 0
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries[name] = {"dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    header = dict(meta)
    header["params"] = entries
    if tokenizer is not None:
        tok_json = json.dumps(tokenizer.to_json(), sort_keys=True)
        tokenizer_path(path).write_text(tok_json)
        header["tokenizer"] = {"file": tokenizer_path(path).name,
                               "sha256": hashlib.sha256(tok_json.encode()).hexdigest()}
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw_header)))
        fh.write(raw_header)
        for blob in blobs:
            fh.write(blob)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], Tokenizer | None]:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        if not MAGIC.startswith(data[:8]):
            raise CheckpointFormatError(f"{path}: bad magic")
        raise CheckpointTruncatedError(f"{path}: file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise CheckpointTruncatedError(f"{path}: header extends past end of file")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    payload = memoryview(data)[start + hlen:]
    arrays = {}
    for name, e in header.get("params", {}).items():
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointTruncatedError(f"{path}: payload for {name!r} is truncated")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if count * dt.itemsize != e["nbytes"]:
            raise CheckpointShapeError(f"{path}: {name!r} byte count disagrees with its shape")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=dt).reshape(e["shape"])
        arrays[name] = arr.astype(np.dtype(e["dtype"]), copy=True)
    tokenizer = None
    tok_meta = header.get("tokenizer")
    if tok_meta:
        tpath = path.with_name(tok_meta["file"])
        if not tpath.is_file():
            raise MissingCheckpointError(f"tokenizer file missing: {tpath}")
        text = tpath.read_text()
        if hashlib.sha256(text.encode()).hexdigest() != tok_meta["sha256"]:
            raise CheckpointFormatError(f"{tpath}: tokenizer hash mismatch")
        tokenizer = Tokenizer.from_json(json.loads(text))
    return header, arrays, tokenizer


def assign_arrays(params: dict, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy stored arrays into live parameters, checking names and shapes."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if strict and (missing or extra):
        raise CheckpointShapeError(f"parameter names differ: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
    for name, p in params.items():
        if name not in arrays:
            continue
        arr = arrays[name]
        if arr.shape != p.shape:
            raise CheckpointShapeError(f"{name}: stored shape {arr.shape} vs model {p.shape}")
        p.data = arr.astype(p.dtype, copy=True)


# ---------------------------------------------------------------- model helpers


def save_model(model, path) -> Path:
    meta = {
        "kind": "model",
        "config": model.config.to_dict(),
        "stages_done": list(model.stages_done),
        "lora": {name: {"rank": m.lora_rank, "alpha": m._lora_alpha} for name, m in model.lora_modules().items()},
    }
    params = {name: p.data for name, p in model.named_parameters()}
    return write_checkpoint(path, params, meta, model.tokenizer)


def load_model(path):
    from .model import ModelConfig, VulQAModel, lora_attach

    header, arrays, tokenizer = read_checkpoint(path)
    if header.get("kind") != "model":
        raise CheckpointFormatError(f"{path}: not a model checkpoint (kind={header.get('kind')!r})")
    if tokenizer is None:
        raise CheckpointFormatError(f"{path}: no tokenizer reference")
    model = VulQAModel(ModelConfig.from_dict(header["config"]), tokenizer)
    lora = header.get("lora", {})
    if lora:
        specs = {(v["rank"], v["alpha"]) for v in lora.values()}
        for rank, alpha in sorted(specs):
            targets = [n for n, v in lora.items() if (v["rank"], v["alpha"]) == (rank, alpha)]
            lora_attach(model, targets, rank, alpha)
    assign_arrays(model.parameters(), arrays)
    model.stages_done = list(header.get("stages_done", []))
    return model


def load_into(model, path) -> None:
    """Overwrite an existing model's parameters (names and shapes must match)."""
    _, arrays, _ = read_checkpoint(path)
    assign_arrays(model.parameters(), arrays)

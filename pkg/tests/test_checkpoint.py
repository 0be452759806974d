import json
import struct

import numpy as np
import pytest

from conftest import tiny_config
from vulqa.checkpoint import (MAGIC, assign_arrays, load_into, load_model, read_checkpoint, save_model,
                              tokenizer_path, write_checkpoint)
from vulqa.errors import (CheckpointFormatError, CheckpointShapeError, CheckpointTruncatedError,
                          CheckpointVersionError, MissingCheckpointError)
from vulqa.model import DecodeConfig, VulQAModel, generate_ids, lora_attach


def _params(m):
    return {n: p.data for n, p in m.named_parameters()}


def test_model_round_trip_is_exact(small_tok, tmp_path):
    m = VulQAModel(tiny_config(), small_tok)
    lora_attach(m)
    for p in m.parameters().values():
        p.data += 0.01 * np.random.default_rng(0).standard_normal(p.data.shape)
    m.stages_done = ["pretrain"]
    path = save_model(m, tmp_path / "m.ckpt")
    assert tokenizer_path(path).exists()
    back = load_model(path)
    a, b = _params(m), _params(back)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert back.stages_done == ["pretrain"] and back.tokenizer.merges == small_tok.merges
    cfg = DecodeConfig(max_new_tokens=6)
    assert generate_ids(m, "int x;", "What?", cfg) == generate_ids(back, "int x;", "What?", cfg)


def test_load_into_and_shape_checks(small_tok, tmp_path):
    m = VulQAModel(tiny_config(), small_tok)
    path = save_model(m, tmp_path / "m.ckpt")
    other = VulQAModel(tiny_config(seed=9), small_tok)
    load_into(other, path)
    assert all(np.array_equal(x, y) for x, y in zip(_params(m).values(), _params(other).values()))
    wide = VulQAModel(tiny_config(proj_hidden=40), small_tok)
    with pytest.raises(CheckpointShapeError):
        load_into(wide, path)
    with pytest.raises(CheckpointShapeError):
        assign_arrays(m.parameters(), {"nope": np.zeros(1)})


def test_little_endian_layout(tmp_path):
    arr = np.arange(6, dtype=">f8").reshape(2, 3)  # big-endian input
    path = write_checkpoint(tmp_path / "x.ckpt", {"w": arr}, {"kind": "raw"})
    raw = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<8sIQ", raw)
    assert (magic, version) == (MAGIC, 1)
    header = json.loads(raw[20:20 + hlen])
    entry = header["params"]["w"]
    assert entry["shape"] == [2, 3] and entry["nbytes"] == 48
    payload = np.frombuffer(raw[20 + hlen + entry["offset"]:][:48], dtype="<f8")
    assert payload.tolist() == list(range(6))
    _, arrays, tok = read_checkpoint(path)
    assert tok is None and np.array_equal(arrays["w"], arr)


def _write_raw(tmp_path, arrs=None):
    return write_checkpoint(tmp_path / "c.ckpt", arrs or {"w": np.ones((2, 2))}, {"kind": "raw"})


def test_missing_file(tmp_path):
    with pytest.raises(MissingCheckpointError):
        read_checkpoint(tmp_path / "absent.ckpt")


def test_bad_magic(tmp_path):
    p = _write_raw(tmp_path)
    p.write_bytes(b"NOTACKPT" + p.read_bytes()[8:])
    with pytest.raises(CheckpointFormatError):
        read_checkpoint(p)


def test_wrong_version(tmp_path):
    p = _write_raw(tmp_path)
    raw = bytearray(p.read_bytes())
    struct.pack_into("<I", raw, 8, 7)
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        read_checkpoint(p)


@pytest.mark.parametrize("cut", [5, 30, -3])
def test_truncation(tmp_path, cut):
    p = _write_raw(tmp_path)
    raw = p.read_bytes()
    p.write_bytes(raw[:cut])
    with pytest.raises(CheckpointTruncatedError):
        read_checkpoint(p)


def test_shape_disagreement(tmp_path):
    p = _write_raw(tmp_path)
    raw = p.read_bytes()
    hlen = struct.unpack_from("<Q", raw, 12)[0]
    header = json.loads(raw[20:20 + hlen])
    header["params"]["w"]["shape"] = [3, 2, 1]
    new = json.dumps(header).encode()
    p.write_bytes(struct.pack("<8sIQ", MAGIC, 1, len(new)) + new + raw[20 + hlen:])
    with pytest.raises(CheckpointShapeError):
        read_checkpoint(p)


def test_tokenizer_tamper_and_loss(small_tok, tmp_path):
    m = VulQAModel(tiny_config(), small_tok)
    path = save_model(m, tmp_path / "m.ckpt")
    tp = tokenizer_path(path)
    tp.write_text(tp.read_text().replace("1", "2", 1))
    with pytest.raises(CheckpointFormatError):
        load_model(path)
    tp.unlink()
    with pytest.raises(MissingCheckpointError):
        load_model(path)


def test_load_model_rejects_other_kinds(tmp_path):
    p = _write_raw(tmp_path)
    with pytest.raises(CheckpointFormatError):
        load_model(p)

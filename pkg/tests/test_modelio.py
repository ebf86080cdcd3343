"""Model and tokenizer container files: round trips and damage detection."""

import json
import struct
import zlib

import numpy as np
import pytest

from pikv.errors import FormatError, TruncatedError
from pikv.modelio import (MODEL_MAGIC, MODEL_VERSION, load_model, load_tokenizer,
                          save_model, save_tokenizer)
from pikv.tasks import Tokenizer, build_vocab


@pytest.fixture()
def model_file(tmp_path, tiny_weights, tiny_cfg):
    path = tmp_path / "m.pkvm"
    save_model(path, tiny_weights, tiny_cfg)
    return path


def test_model_round_trip(model_file, tiny_weights, tiny_cfg):
    w, cfg = load_model(model_file)
    assert cfg == tiny_cfg
    np.testing.assert_array_equal(w.embed, tiny_weights.embed)
    np.testing.assert_array_equal(w.final_norm, tiny_weights.final_norm)
    np.testing.assert_array_equal(w.lm_head, tiny_weights.lm_head)
    for a, b in zip(w.layers, tiny_weights.layers):
        np.testing.assert_array_equal(a.wq, b.wq)
        np.testing.assert_array_equal(a.w_down, b.w_down)
    assert w.fingerprint(cfg) == tiny_weights.fingerprint(tiny_cfg)


def test_save_is_byte_stable(tmp_path, tiny_weights, tiny_cfg):
    a, b = tmp_path / "a.pkvm", tmp_path / "b.pkvm"
    save_model(a, tiny_weights, tiny_cfg)
    save_model(b, tiny_weights, tiny_cfg)
    assert a.read_bytes() == b.read_bytes()


def test_frame_layout(model_file):
    data = model_file.read_bytes()
    magic, version, hlen = struct.unpack_from("<4sHI", data)
    assert magic == MODEL_MAGIC and version == MODEL_VERSION
    header = json.loads(data[10:10 + hlen])
    assert set(header) == {"config", "fingerprint", "tensors"}
    # trailing u32 checksums the tensor payload; the header is covered by
    # the fingerprint check at load time
    want = zlib.crc32(data[10 + hlen:-4]) & 0xFFFFFFFF
    assert struct.unpack("<I", data[-4:])[0] == want


def test_bad_magic_rejected(tmp_path, model_file):
    data = bytearray(model_file.read_bytes())
    data[:4] = b"NOPE"
    bad = tmp_path / "bad.pkvm"
    bad.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_model(bad)


def test_unknown_version_rejected(tmp_path, model_file):
    data = bytearray(model_file.read_bytes())
    struct.pack_into("<H", data, 4, 0x7FFF)
    bad = tmp_path / "bad.pkvm"
    bad.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_model(bad)


def test_payload_corruption_is_caught(tmp_path, model_file):
    data = bytearray(model_file.read_bytes())
    data[len(data) // 2] ^= 0xFF
    bad = tmp_path / "bad.pkvm"
    bad.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_model(bad)


def test_truncation_is_caught(tmp_path, model_file):
    data = model_file.read_bytes()
    for cut in (4, 9, len(data) // 2, len(data) - 1):
        bad = tmp_path / f"cut{cut}.pkvm"
        bad.write_bytes(data[:cut])
        with pytest.raises((TruncatedError, FormatError)):
            load_model(bad)
    short = tmp_path / "cut4b.pkvm"
    short.write_bytes(data[:4])
    with pytest.raises(TruncatedError):
        load_model(short)


def test_garbled_header_rejected(tmp_path, model_file):
    data = bytearray(model_file.read_bytes())
    data[12] = 0x00  # stomp inside the JSON header
    bad = tmp_path / "bad.pkvm"
    bad.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_model(bad)


def test_fingerprint_mismatch_rejected(tmp_path, tiny_weights, tiny_cfg):
    path = tmp_path / "m.pkvm"
    save_model(path, tiny_weights, tiny_cfg)
    data = bytearray(path.read_bytes())
    hlen = struct.unpack_from("<I", data, 6)[0]
    header = json.loads(data[10:10 + hlen])
    header["fingerprint"] = "0" * 16
    blob = json.dumps(header, sort_keys=True).encode()
    # keep the frame and payload checksum intact so only the fingerprint trips
    payload = bytes(data[10 + hlen:-4])
    body = bytes(data[:6]) + struct.pack("<I", len(blob)) + blob + payload
    body += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    bad = tmp_path / "bad.pkvm"
    bad.write_bytes(body)
    with pytest.raises(FormatError, match="fingerprint"):
        load_model(bad)


def test_tokenizer_round_trip(tmp_path):
    tok = Tokenizer(build_vocab())
    path = tmp_path / "tok.json"
    save_tokenizer(path, tok)
    clone = load_tokenizer(path)
    assert clone.tokens == tok.tokens
    d = json.loads(path.read_text())
    assert d["version"] == 1 and isinstance(d["tokens"], list)


def test_tokenizer_version_guard(tmp_path):
    path = tmp_path / "tok.json"
    path.write_text(json.dumps({"version": 9, "tokens": ["<eos>"]}))
    with pytest.raises(FormatError):
        load_tokenizer(path)

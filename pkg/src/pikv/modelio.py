"""On-disk model and tokenizer formats.

A model file is self-describing and single-file:

    magic "PKVM" | u16 version | u32 header length | JSON header
    | f32 little-endian tensor payload | u32 CRC32 of the payload

The header carries the architecture config, the creating weights'
fingerprint, and a tensor directory of (name, shape, offset) entries with
offsets relative to the payload start. Tensors are stored in canonical
naming order and packed contiguously.

The tokenizer table is a plain JSON list mapping token id to its byte
string; ids are implicit list positions.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedError
from .model import ModelConfig, ModelWeights
from .tasks import Tokenizer
from .tensor import F32

MODEL_MAGIC = b"PKVM"
MODEL_VERSION = 1
_FRAME = struct.Struct("<4sHI")


def save_model(path, weights: ModelWeights, config: ModelConfig) -> None:
    names = weights.named_tensors()
    directory = []
    payload = bytearray()
    for name, arr in names:
        arr = np.ascontiguousarray(arr, dtype=F32)
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": len(payload)})
        payload += arr.astype("<f4").tobytes()
    header = json.dumps({
        "config": config.to_json_dict(),
        "fingerprint": weights.fingerprint(config),
        "tensors": directory,
    }, sort_keys=True).encode("utf-8")
    blob = _FRAME.pack(MODEL_MAGIC, MODEL_VERSION, len(header)) + header
    blob += bytes(payload)
    blob += struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def load_model(path) -> tuple[ModelWeights, ModelConfig]:
    data = Path(path).read_bytes()
    if len(data) < _FRAME.size:
        raise TruncatedError(f"{path}: file shorter than the fixed frame")
    magic, version, header_len = _FRAME.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model file version {version}")
    header_end = _FRAME.size + header_len
    if len(data) < header_end + 4:
        raise TruncatedError(f"{path}: header extends past end of file")
    try:
        header = json.loads(data[_FRAME.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc

    payload = data[header_end:-4]
    (crc_stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise FormatError(f"{path}: payload checksum mismatch")

    config = ModelConfig(**header["config"])
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(int(d) for d in entry["shape"])
        nbytes = 4 * int(np.prod(shape)) if shape else 4
        off = int(entry["offset"])
        if off < 0 or off + nbytes > len(payload):
            raise TruncatedError(f"{path}: tensor {entry['name']!r} exceeds payload")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off)
        tensors[entry["name"]] = arr.reshape(shape).astype(F32)
    weights = ModelWeights.from_named(config, tensors)
    want = header.get("fingerprint")
    if want is not None and weights.fingerprint(config) != want:
        raise FormatError(f"{path}: fingerprint mismatch "
                          f"({weights.fingerprint(config)} != {want})")
    return weights, config


def save_tokenizer(path, tok: Tokenizer) -> None:
    Path(path).write_text(
        json.dumps({"version": 1, "tokens": tok.tokens}, ensure_ascii=False),
        encoding="utf-8")


def load_tokenizer(path) -> Tokenizer:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: unreadable token table: {exc}") from exc
    if d.get("version") != 1:
        raise FormatError(f"{path}: unsupported token table version {d.get('version')!r}")
    return Tokenizer(d["tokens"])

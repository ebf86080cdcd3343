"""Position-independent chunk KV store and cache assembly.

Chunks are prefilled in isolation at positions 0..t-1 and persisted with
*unrotated* keys, so a chunk's bytes do not depend on where it will later
sit in a prompt. Assembly concatenates chunks in prompt order and applies
the rotary rotation once, at each token's final global position. Keys are
rebased exactly once by construction: the stored form never carries a
rotation, and the assembled form always does.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (ArgumentError, FormatError, IncompatibleError, InputError,
                     ShapeError, StateError, TruncatedError)
from .model import ModelConfig, ModelWeights, full_prefill
from .tensor import F32, rope_apply

_MAGIC = b"PKVC"
_VERSION = 1


def chunk_content_id(fingerprint: str, token_ids) -> int:
    """64-bit content hash of (model fingerprint, token ids)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(fingerprint.encode())
    h.update(np.asarray(token_ids, dtype=np.int64).tobytes())
    return int.from_bytes(h.digest(), "little")


@dataclass
class ChunkKV:
    """Per-layer K (unrotated) and V for one chunk, plus identity metadata."""

    chunk_id: int
    config_fingerprint: str
    token_ids: np.ndarray            # [t]
    keys_norope: list[np.ndarray]    # per layer [t, n_kv, d_k]
    values: list[np.ndarray]         # per layer [t, n_kv, d_k]

    @property
    def n_tokens(self) -> int:
        return int(self.token_ids.shape[0])


def precompute_chunk(weights: ModelWeights, config: ModelConfig, tokens) -> ChunkKV:
    """Isolated prefill of one chunk; keys are stored before any rotation."""
    trace = full_prefill(weights, config, tokens, capture_keys_norope=True)
    fp = weights.fingerprint(config)
    return ChunkKV(
        chunk_id=chunk_content_id(fp, trace.tokens),
        config_fingerprint=fp,
        token_ids=trace.tokens,
        keys_norope=trace.keys_norope,
        values=trace.values,
    )


@dataclass
class AssembledCache:
    """Chunk KVs concatenated in prompt order with keys rebased to global positions."""

    config_fingerprint: str
    token_ids: np.ndarray                  # [s]
    positions: np.ndarray                  # [s], 0..s-1
    chunk_ids: list[int]
    chunk_bounds: list[tuple[int, int]]    # [start, end) per chunk in prompt order
    source_chunk: np.ndarray               # [s] chunk ordinal per token
    source_local: np.ndarray               # [s] token index inside its chunk
    keys_rebased: list[np.ndarray]         # per layer [s, n_kv, d_k]
    values: list[np.ndarray]               # per layer [s, n_kv, d_k]
    recomputed: np.ndarray                 # [L, s] bool
    finalized: bool = False
    access_log: list[tuple[str, int]] | None = field(default=None, repr=False)

    @property
    def context_length(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def n_layers(self) -> int:
        return len(self.keys_rebased)

    def layer_kv(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        if self.access_log is not None:
            self.access_log.append(("read", layer))
        return self.keys_rebased[layer], self.values[layer]

    def kv_layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [self.layer_kv(li) for li in range(self.n_layers)]


def assemble(chunks: list[ChunkKV], config: ModelConfig,
             track_access: bool = False) -> AssembledCache:
    """Concatenate chunk KVs and rotate keys at their global positions."""
    if not chunks:
        raise InputError("assemble needs at least one chunk")
    fp = chunks[0].config_fingerprint
    for c in chunks:
        if c.config_fingerprint != fp:
            raise IncompatibleError(
                f"chunk {c.chunk_id:#x} was precomputed under fingerprint "
                f"{c.config_fingerprint}, expected {fp}")
        if len(c.keys_norope) != config.n_layers:
            raise IncompatibleError("chunk layer count does not match model config")
    token_ids = np.concatenate([c.token_ids for c in chunks])
    s = token_ids.shape[0]
    positions = np.arange(s, dtype=np.int64)
    bounds, src_chunk, src_local = [], [], []
    start = 0
    for ci, c in enumerate(chunks):
        end = start + c.n_tokens
        bounds.append((start, end))
        src_chunk.append(np.full(c.n_tokens, ci, dtype=np.int32))
        src_local.append(np.arange(c.n_tokens, dtype=np.int32))
        start = end
    keys, values = [], []
    for li in range(config.n_layers):
        k_nr = np.concatenate([c.keys_norope[li] for c in chunks], axis=0)
        keys.append(rope_apply(k_nr, positions, config.rope_theta))
        values.append(np.concatenate([c.values[li] for c in chunks], axis=0))
    return AssembledCache(
        config_fingerprint=fp,
        token_ids=token_ids,
        positions=positions,
        chunk_ids=[c.chunk_id for c in chunks],
        chunk_bounds=bounds,
        source_chunk=np.concatenate(src_chunk),
        source_local=np.concatenate(src_local),
        keys_rebased=keys,
        values=values,
        recomputed=np.zeros((config.n_layers, s), dtype=bool),
        access_log=[] if track_access else None,
    )


def replace_entries(cache: AssembledCache, layer: int, indices, new_keys: np.ndarray,
                    new_values: np.ndarray) -> None:
    """Overwrite cache entries at one layer and mark them recomputed."""
    if not 0 <= layer < cache.n_layers:
        raise ArgumentError(f"layer {layer} out of range for {cache.n_layers} layers")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= cache.context_length):
        raise InputError("replacement index out of range")
    want = (idx.shape[0],) + cache.keys_rebased[layer].shape[1:]
    if new_keys.shape != want or new_values.shape != want:
        raise ShapeError(f"replacement shape {new_keys.shape}/{new_values.shape}, expected {want}")
    if cache.access_log is not None:
        cache.access_log.append(("write", layer))
    cache.keys_rebased[layer][idx] = new_keys
    cache.values[layer][idx] = new_values
    cache.recomputed[layer, idx] = True


def store_chunk(chunk: ChunkKV, path) -> None:
    """Serialize a chunk: magic, version, framed JSON header, raw K/V blocks."""
    t = chunk.n_tokens
    n_layers = len(chunk.keys_norope)
    n_kv, d_k = chunk.keys_norope[0].shape[1:]
    header = {
        "fingerprint": chunk.config_fingerprint,
        "n_tokens": t,
        "n_layers": n_layers,
        "n_kv_heads": int(n_kv),
        "head_dim": int(d_k),
        "token_ids": [int(x) for x in chunk.token_ids],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HI", _VERSION, len(blob)))
        f.write(blob)
        for li in range(n_layers):
            f.write(np.ascontiguousarray(chunk.keys_norope[li], dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(chunk.values[li], dtype="<f4").tobytes())


def load_chunk(path) -> ChunkKV:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 10:
        raise TruncatedError("file ends inside the fixed header")
    if data[:4] != _MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {_MAGIC!r}")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported chunk file version {version}")
    if len(data) < 10 + hlen:
        raise TruncatedError("file ends inside the JSON header")
    try:
        header = json.loads(data[10:10 + hlen])
        t = int(header["n_tokens"])
        n_layers = int(header["n_layers"])
        n_kv = int(header["n_kv_heads"])
        d_k = int(header["head_dim"])
        token_ids = np.asarray(header["token_ids"], dtype=np.int64)
        fp = header["fingerprint"]
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"corrupt chunk header: {e}") from e
    if token_ids.shape[0] != t:
        raise FormatError("token_ids length disagrees with n_tokens")
    block = t * n_kv * d_k * 4
    need = 10 + hlen + 2 * n_layers * block
    if len(data) < need:
        raise TruncatedError(f"expected {need} bytes, file has {len(data)}")
    keys, values = [], []
    off = 10 + hlen
    for _ in range(n_layers):
        k = np.frombuffer(data, dtype="<f4", count=t * n_kv * d_k, offset=off)
        off += block
        v = np.frombuffer(data, dtype="<f4", count=t * n_kv * d_k, offset=off)
        off += block
        keys.append(np.ascontiguousarray(k.reshape(t, n_kv, d_k), dtype=F32))
        values.append(np.ascontiguousarray(v.reshape(t, n_kv, d_k), dtype=F32))
    return ChunkKV(
        chunk_id=chunk_content_id(fp, token_ids),
        config_fingerprint=fp,
        token_ids=token_ids,
        keys_norope=keys,
        values=values,
    )


def mark_finalized(cache: AssembledCache) -> None:
    """Flip the one-shot finalization flag; a second attempt is a state error."""
    if cache.finalized:
        raise StateError("cache already finalized with query tokens")
    cache.finalized = True

"""Pre-norm rotary decoder with grouped KV heads and instrumented forward passes.

Architecture (fixed): RMS-norm -> attention -> residual, RMS-norm ->
SiLU-gated FFN -> residual, repeated n_layers times, final RMS-norm and an
untied output head. No biases anywhere. Rotary rotation acts on consecutive
feature pairs and is applied to Q and K only; value vectors never see
positions, which is what makes cached entries position-independent.

Batch size is always 1: a forward pass works on a single token sequence.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericsError, ShapeError, StateError
from .tensor import F32, F64, FlopCounter, matmul, rms_norm, rope_apply


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    hidden_dim: int
    ffn_dim: int
    vocab_size: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        if min(self.n_layers, self.n_heads, self.n_kv_heads, self.head_dim,
               self.ffn_dim, self.vocab_size) <= 0:
            raise ConfigError("all model dimensions must be positive")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.hidden_dim != self.n_heads * self.head_dim:
            raise ConfigError(
                f"hidden_dim={self.hidden_dim} != n_heads*head_dim="
                f"{self.n_heads * self.head_dim}")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ConfigError("rope_theta and norm_eps must be positive")

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def to_json_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads, "head_dim": self.head_dim,
            "hidden_dim": self.hidden_dim, "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size, "rope_theta": self.rope_theta,
            "norm_eps": self.norm_eps,
        }


@dataclass
class LayerWeights:
    attn_norm: np.ndarray   # [hidden]
    wq: np.ndarray          # [hidden, n_heads*head_dim]
    wk: np.ndarray          # [hidden, n_kv_heads*head_dim]
    wv: np.ndarray          # [hidden, n_kv_heads*head_dim]
    wo: np.ndarray          # [n_heads*head_dim, hidden]
    ffn_norm: np.ndarray    # [hidden]
    w_gate: np.ndarray      # [hidden, ffn]
    w_up: np.ndarray        # [hidden, ffn]
    w_down: np.ndarray      # [ffn, hidden]


@dataclass
class ModelWeights:
    embed: np.ndarray       # [vocab, hidden]
    layers: list[LayerWeights]
    final_norm: np.ndarray  # [hidden]
    lm_head: np.ndarray     # [hidden, vocab]
    _fingerprint: str | None = field(default=None, repr=False, compare=False)

    def validate(self, config: ModelConfig) -> None:
        h, kv, hd = config.hidden_dim, config.kv_dim, config.n_heads * config.head_dim
        if self.embed.shape != (config.vocab_size, h):
            raise ConfigError(f"embed shape {self.embed.shape} does not match config")
        if len(self.layers) != config.n_layers:
            raise ConfigError(f"{len(self.layers)} layer weight sets for {config.n_layers} layers")
        for i, lw in enumerate(self.layers):
            expect = {
                "attn_norm": (h,), "wq": (h, hd), "wk": (h, kv), "wv": (h, kv),
                "wo": (hd, h), "ffn_norm": (h,), "w_gate": (h, config.ffn_dim),
                "w_up": (h, config.ffn_dim), "w_down": (config.ffn_dim, h),
            }
            for name, shape in expect.items():
                got = getattr(lw, name).shape
                if got != shape:
                    raise ConfigError(f"layers.{i}.{name} shape {got}, expected {shape}")
        if self.final_norm.shape != (h,):
            raise ConfigError("final_norm shape mismatch")
        if self.lm_head.shape != (h, config.vocab_size):
            raise ConfigError("lm_head shape mismatch")

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Canonical (name, tensor) directory used by the model file format."""
        out = [("embed.weight", self.embed)]
        for i, lw in enumerate(self.layers):
            p = f"layers.{i}"
            out += [
                (f"{p}.attn_norm.gain", lw.attn_norm),
                (f"{p}.attn.wq", lw.wq), (f"{p}.attn.wk", lw.wk),
                (f"{p}.attn.wv", lw.wv), (f"{p}.attn.wo", lw.wo),
                (f"{p}.ffn_norm.gain", lw.ffn_norm),
                (f"{p}.ffn.w_gate", lw.w_gate), (f"{p}.ffn.w_up", lw.w_up),
                (f"{p}.ffn.w_down", lw.w_down),
            ]
        out += [("final_norm.gain", self.final_norm), ("lm_head.weight", self.lm_head)]
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> "ModelWeights":
        def take(name: str) -> np.ndarray:
            if name not in tensors:
                raise ConfigError(f"missing tensor {name!r}")
            return np.ascontiguousarray(tensors[name], dtype=F32)

        layers = []
        for i in range(config.n_layers):
            p = f"layers.{i}"
            layers.append(LayerWeights(
                attn_norm=take(f"{p}.attn_norm.gain"),
                wq=take(f"{p}.attn.wq"), wk=take(f"{p}.attn.wk"),
                wv=take(f"{p}.attn.wv"), wo=take(f"{p}.attn.wo"),
                ffn_norm=take(f"{p}.ffn_norm.gain"),
                w_gate=take(f"{p}.ffn.w_gate"), w_up=take(f"{p}.ffn.w_up"),
                w_down=take(f"{p}.ffn.w_down"),
            ))
        weights = cls(embed=take("embed.weight"), layers=layers,
                      final_norm=take("final_norm.gain"), lm_head=take("lm_head.weight"))
        weights.validate(config)
        return weights

    def fingerprint(self, config: ModelConfig) -> str:
        """16-hex-char digest of config plus weight bytes.

        Weights are treated as immutable once fingerprinted; the digest is
        cached on first use.
        """
        if self._fingerprint is None:
            h = hashlib.blake2b(digest_size=8)
            h.update(json.dumps(config.to_json_dict(), sort_keys=True).encode())
            for name, t in self.named_tensors():
                h.update(name.encode())
                h.update(np.ascontiguousarray(t, dtype=F32).tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint


def random_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded random weights; projections get 1/sqrt(fan_in) scale."""
    rng = np.random.default_rng(seed)

    def mat(rows: int, cols: int) -> np.ndarray:
        return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(F32)

    h, hd, kv, f = config.hidden_dim, config.n_heads * config.head_dim, config.kv_dim, config.ffn_dim
    layers = [
        LayerWeights(
            attn_norm=np.ones(h, dtype=F32),
            wq=mat(h, hd), wk=mat(h, kv), wv=mat(h, kv), wo=mat(hd, h),
            ffn_norm=np.ones(h, dtype=F32),
            w_gate=mat(h, f), w_up=mat(h, f), w_down=mat(f, h),
        )
        for _ in range(config.n_layers)
    ]
    return ModelWeights(
        embed=rng.standard_normal((config.vocab_size, h)).astype(F32),
        layers=layers,
        final_norm=np.ones(h, dtype=F32),
        lm_head=mat(h, config.vocab_size),
    )


@dataclass
class FlopTally:
    """Per-run FLOP books: everything, plus attention-score matmuls alone."""

    total: FlopCounter = field(default_factory=FlopCounter)
    attn_scores: FlopCounter = field(default_factory=FlopCounter)


@dataclass
class PrefillTrace:
    tokens: np.ndarray
    positions: np.ndarray
    keys: list[np.ndarray]                 # per layer [n, n_kv, d_k], rotated
    values: list[np.ndarray]               # per layer [n, n_kv, d_k]
    logits: np.ndarray                     # [n, vocab]
    keys_norope: list[np.ndarray] | None = None
    attn: list[np.ndarray] | None = None          # per layer [n, n], head-averaged
    attn_heads: list[np.ndarray] | None = None    # per layer [H, n, n], debug only


@dataclass
class KVCache:
    """Growable per-layer K/V state for incremental decoding."""

    keys: list[np.ndarray]
    values: list[np.ndarray]
    positions: np.ndarray
    last_logits: np.ndarray | None = None

    @property
    def length(self) -> int:
        return int(self.positions.shape[0])

    @classmethod
    def from_prefill(cls, trace: PrefillTrace) -> "KVCache":
        return cls(
            keys=[k.copy() for k in trace.keys],
            values=[v.copy() for v in trace.values],
            positions=trace.positions.copy(),
            last_logits=trace.logits[-1].copy(),
        )


@dataclass
class GenerationResult:
    tokens: list[int]
    # one entry per generated token: per-layer head-averaged attention rows
    step_attn: list[list[np.ndarray]] | None = None


def _check_tokens(tokens, config: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] == 0:
        raise InputError(f"token sequence must be non-empty 1-D, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError("token id out of range for vocab")
    return ids


def _masked_softmax(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Softmax over allowed entries per row; disallowed entries are exactly 0."""
    s = scores.astype(F64)
    s[~allowed] = -np.inf
    m = s.max(axis=1, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericsError("attention row with no visible cache entries")
    e = np.exp(s - m)
    e[~allowed] = 0.0
    denom = e.sum(axis=1, keepdims=True)
    return (e / denom).astype(F32)


def _silu(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(F64)
    return (x64 / (1.0 + np.exp(-x64))).astype(F32)


def _project_qkv(lw: LayerWeights, config: ModelConfig, x: np.ndarray,
                 positions: np.ndarray, tally: FlopTally | None):
    """Q/K/V projections for normalized activations x; K returned both raw and rotated."""
    n = x.shape[0]
    cnt = tally.total if tally else None
    q = matmul(x, lw.wq, cnt).reshape(n, config.n_heads, config.head_dim)
    q_rot = rope_apply(q, positions, config.rope_theta)
    k = matmul(x, lw.wk, cnt).reshape(n, config.n_kv_heads, config.head_dim)
    k_rot = rope_apply(k, positions, config.rope_theta)
    v = matmul(x, lw.wv, cnt).reshape(n, config.n_kv_heads, config.head_dim)
    return q_rot, k, k_rot, v


def _attend(config: ModelConfig, q_rot: np.ndarray, keys: np.ndarray, values: np.ndarray,
            pos_q: np.ndarray, pos_kv: np.ndarray, tally: FlopTally | None,
            want_rows: bool, want_heads: bool):
    """Causal grouped-head attention of q_rot [n,H,dk] over a [t,n_kv,dk] cache.

    Visibility is purely positional: entry j is visible to row i iff
    pos_kv[j] <= pos_q[i]. Returns concatenated head outputs [n, H*dk] plus
    optional head-averaged rows [n, t].
    """
    n, H, dk = q_rot.shape
    t = keys.shape[0]
    group = H // config.n_kv_heads
    allowed = pos_kv[None, :] <= pos_q[:, None]
    scale = F32(1.0 / np.sqrt(dk))
    cnt = tally.total if tally else None
    heads = np.empty((n, H, dk), dtype=F32)
    rows64 = np.zeros((n, t), dtype=F64) if want_rows else None
    per_head = np.empty((H, n, t), dtype=F32) if want_heads else None
    for h in range(H):
        g = h // group
        scores = matmul(q_rot[:, h, :], np.ascontiguousarray(keys[:, g, :].T), cnt) * scale
        if tally is not None:
            tally.attn_scores.add(n * dk * t)
        attn = _masked_softmax(scores, allowed)
        heads[:, h, :] = matmul(attn, np.ascontiguousarray(values[:, g, :]), cnt)
        if rows64 is not None:
            rows64 += attn
        if per_head is not None:
            per_head[h] = attn
    rows = (rows64 / H).astype(F32) if rows64 is not None else None
    return heads.reshape(n, H * dk), rows, per_head


def _mix(lw: LayerWeights, config: ModelConfig, h: np.ndarray, q_rot: np.ndarray,
         keys: np.ndarray, values: np.ndarray, pos_q: np.ndarray, pos_kv: np.ndarray,
         tally: FlopTally | None, want_rows: bool = False, want_heads: bool = False):
    """Attention + FFN residual halves of one block (projections already done)."""
    cnt = tally.total if tally else None
    attn_out, rows, per_head = _attend(config, q_rot, keys, values, pos_q, pos_kv,
                                       tally, want_rows, want_heads)
    h = h + matmul(attn_out, lw.wo, cnt)
    y = rms_norm(h, lw.ffn_norm, config.norm_eps)
    gate = _silu(matmul(y, lw.w_gate, cnt))
    up = matmul(y, lw.w_up, cnt)
    h = h + matmul(gate * up, lw.w_down, cnt)
    return h, rows, per_head


def _head_logits(weights: ModelWeights, config: ModelConfig, h: np.ndarray,
                 tally: FlopTally | None) -> np.ndarray:
    z = rms_norm(h, weights.final_norm, config.norm_eps)
    return matmul(z, weights.lm_head, tally.total if tally else None)


def full_prefill(weights: ModelWeights, config: ModelConfig, tokens,
                 capture_attn: bool = False, capture_attn_heads: bool = False,
                 capture_keys_norope: bool = False,
                 tally: FlopTally | None = None) -> PrefillTrace:
    """Ground-truth forward pass over the whole sequence at positions 0..n-1."""
    ids = _check_tokens(tokens, config)
    n = ids.shape[0]
    positions = np.arange(n, dtype=np.int64)
    h = weights.embed[ids].copy()
    keys, values, keys_nr = [], [], [] if capture_keys_norope else None
    attn = [] if capture_attn else None
    attn_heads = [] if capture_attn_heads else None
    for lw in weights.layers:
        x = rms_norm(h, lw.attn_norm, config.norm_eps)
        q_rot, k, k_rot, v = _project_qkv(lw, config, x, positions, tally)
        h, rows, per_head = _mix(lw, config, h, q_rot, k_rot, v, positions, positions,
                                 tally, want_rows=capture_attn, want_heads=capture_attn_heads)
        keys.append(k_rot)
        values.append(v)
        if keys_nr is not None:
            keys_nr.append(k)
        if attn is not None:
            attn.append(rows)
        if attn_heads is not None:
            attn_heads.append(per_head)
    logits = _head_logits(weights, config, h, tally)
    return PrefillTrace(tokens=ids, positions=positions, keys=keys, values=values,
                        logits=logits, keys_norope=keys_nr, attn=attn, attn_heads=attn_heads)


@dataclass
class QueryPassResult:
    last_logits: np.ndarray                 # [vocab], final query token
    rows: list[np.ndarray] | None           # per layer [m, t+m], head-averaged
    fresh_keys: list[np.ndarray]            # per layer [m, n_kv, d_k], rotated
    fresh_values: list[np.ndarray]          # per layer [m, n_kv, d_k]


def query_pass(weights: ModelWeights, config: ModelConfig,
               kv_layers: list[tuple[np.ndarray, np.ndarray]], kv_positions: np.ndarray,
               query_tokens, capture_attn: bool = False,
               tally: FlopTally | None = None) -> QueryPassResult:
    """Run query tokens over an existing per-layer KV state without mutating it.

    Query tokens sit at positions following the cache and causally attend to
    every cache entry plus their own prefix. This single pass is shared by
    scoring (attention capture), cache finalization, and loss probes.
    """
    ids = _check_tokens(query_tokens, config)
    m = ids.shape[0]
    t = int(kv_positions.shape[0])
    pos_q = t + np.arange(m, dtype=np.int64)
    h = weights.embed[ids].copy()
    rows_out = [] if capture_attn else None
    fresh_k, fresh_v = [], []
    for li, lw in enumerate(weights.layers):
        x = rms_norm(h, lw.attn_norm, config.norm_eps)
        q_rot, _, k_rot, v = _project_qkv(lw, config, x, pos_q, tally)
        ck, cv = kv_layers[li]
        k_all = np.concatenate([ck, k_rot], axis=0)
        v_all = np.concatenate([cv, v], axis=0)
        pos_all = np.concatenate([kv_positions, pos_q])
        h, rows, _ = _mix(lw, config, h, q_rot, k_all, v_all, pos_q, pos_all,
                          tally, want_rows=capture_attn)
        fresh_k.append(k_rot)
        fresh_v.append(v)
        if rows_out is not None:
            rows_out.append(rows)
    logits = _head_logits(weights, config, h, tally)
    return QueryPassResult(last_logits=logits[-1], rows=rows_out,
                           fresh_keys=fresh_k, fresh_values=fresh_v)


def _decode_core(weights: ModelWeights, config: ModelConfig, cache: KVCache,
                 token: int, position: int, want_rows: bool,
                 tally: FlopTally | None):
    ids = _check_tokens([token], config)
    if position != cache.length:
        raise StateError(f"decode position {position} != cache length {cache.length}")
    pos_q = np.array([position], dtype=np.int64)
    h = weights.embed[ids].copy()
    rows_out = [] if want_rows else None
    for li, lw in enumerate(weights.layers):
        x = rms_norm(h, lw.attn_norm, config.norm_eps)
        q_rot, _, k_rot, v = _project_qkv(lw, config, x, pos_q, tally)
        k_all = np.concatenate([cache.keys[li], k_rot], axis=0)
        v_all = np.concatenate([cache.values[li], v], axis=0)
        pos_all = np.concatenate([cache.positions, pos_q])
        h, rows, _ = _mix(lw, config, h, q_rot, k_all, v_all, pos_q, pos_all,
                          tally, want_rows=want_rows)
        cache.keys[li] = k_all
        cache.values[li] = v_all
        if rows_out is not None:
            rows_out.append(rows)
    cache.positions = np.concatenate([cache.positions, pos_q])
    logits = _head_logits(weights, config, h, tally)[0]
    return logits, rows_out


def decode_step(weights: ModelWeights, config: ModelConfig, cache: KVCache,
                token: int, position: int,
                tally: FlopTally | None = None) -> tuple[np.ndarray, KVCache]:
    """Append one token to the cache and return next-token logits.

    Preconditions are checked before any mutation, so a failed call leaves
    the cache untouched.
    """
    logits, _ = _decode_core(weights, config, cache, token, position, False, tally)
    cache.last_logits = logits
    return logits, cache


def greedy_generate(weights: ModelWeights, config: ModelConfig, cache: KVCache,
                    max_new_tokens: int, stop_ids=(), include_stop: bool = False,
                    capture_attn: bool = False,
                    tally: FlopTally | None = None) -> GenerationResult:
    """Deterministic argmax decoding from a finalized cache.

    The first token comes from cache.last_logits (set by prefill conversion
    or query finalization). Argmax ties resolve to the smaller token id.
    """
    if cache.last_logits is None:
        raise StateError("cache has no pending logits; finalize or prefill first")
    stop = set(int(s) for s in stop_ids)
    out: list[int] = []
    step_attn: list[list[np.ndarray]] | None = [] if capture_attn else None
    logits = cache.last_logits
    for _ in range(max_new_tokens):
        nxt = int(np.argmax(logits))
        if nxt in stop:
            if include_stop:
                out.append(nxt)
            break
        out.append(nxt)
        logits, rows = _decode_core(weights, config, cache, nxt, cache.length,
                                    capture_attn, tally)
        cache.last_logits = logits
        if step_attn is not None:
            step_attn.append(rows)
    return GenerationResult(tokens=out, step_attn=step_attn)

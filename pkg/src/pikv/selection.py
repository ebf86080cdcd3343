"""Token-selection strategies: which cached entries earn recomputation.

Every strategy produces a per-layer score matrix plus a fused vector; the
budgeted top-k of the fused vector is the selected set. Scores mean "worth
recomputing": higher is more valuable. The fused vector is always the
uniform mean over layer rows, so single-vector strategies simply broadcast
their vector to every layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chunkstore import AssembledCache
from .errors import ArgumentError, ShapeError
from .metrics import AttnSummary
from .model import FlopTally, ModelConfig, ModelWeights, _mix, _project_qkv, query_pass
from .tensor import F32, F64, matmul, ratio_budget, rms_norm, top_k_indices

STRATEGIES = ("prophet", "epic", "cacheblend_l1", "kvshare_l1", "random", "ideal_oracle")


@dataclass
class ValueScores:
    strategy: str
    per_layer: np.ndarray   # [L, s]
    fused: np.ndarray       # [s]

    def __post_init__(self) -> None:
        if self.per_layer.ndim != 2:
            raise ShapeError(f"per-layer scores must be [L, s], got {self.per_layer.shape}")
        want = fuse_layers(self.per_layer)
        if self.fused.shape != want.shape or not np.allclose(self.fused, want, atol=1e-6):
            raise ArgumentError("fused scores must be the mean of the per-layer rows")

    @classmethod
    def from_vector(cls, strategy: str, vector, n_layers: int) -> "ValueScores":
        v = np.asarray(vector, dtype=F32)
        per_layer = np.repeat(v[None, :], n_layers, axis=0)
        return cls(strategy=strategy, per_layer=per_layer, fused=fuse_layers(per_layer))


@dataclass
class SelectionResult:
    indices: list[int]   # ascending
    p: float
    k: int


def fuse_layers(per_layer: np.ndarray) -> np.ndarray:
    """Uniform mean over layers; same ranking as the sum."""
    return per_layer.astype(F64).mean(axis=0).astype(F32)


def select_top_p(scores: ValueScores, p: float) -> SelectionResult:
    """Top ceil(p*s) tokens of the fused vector; ties toward smaller index."""
    s = scores.fused.shape[0]
    k = ratio_budget(p, s)
    return SelectionResult(indices=top_k_indices(scores.fused, k), p=p, k=k)


def score_prophet(weights: ModelWeights, config: ModelConfig, cache: AssembledCache,
                  query_tokens, tally: FlopTally | None = None,
                  renormalize_context_only: bool = False) -> ValueScores:
    """Query-to-context attention over the assembled (approximate) cache.

    One narrow pass: the query tokens attend to the reused entries plus
    their own causal prefix, and each layer's head-averaged, query-averaged
    attention row over the context becomes that layer's score vector. By
    default rows are the raw softmax rows, so the query's self-attention
    mass stays in the denominator; renormalize_context_only rescales each
    row over the context columns instead.
    """
    res = query_pass(weights, config, cache.kv_layers(), cache.positions,
                     query_tokens, capture_attn=True, tally=tally)
    s = cache.context_length
    per_layer = np.empty((config.n_layers, s), dtype=F32)
    for li, rows in enumerate(res.rows):
        ctx = rows[:, :s].astype(F64)
        if renormalize_context_only:
            denom = ctx.sum(axis=1, keepdims=True)
            ctx = ctx / np.maximum(denom, 1e-30)
        per_layer[li] = ctx.mean(axis=0).astype(F32)
    return ValueScores(strategy="prophet", per_layer=per_layer, fused=fuse_layers(per_layer))


def score_epic(cache: AssembledCache, n_layers: int) -> ValueScores:
    """Static positional prior: negated token distance to its chunk start."""
    vec = (-cache.source_local.astype(np.int64)).astype(F32)
    return ValueScores.from_vector("epic", vec, n_layers)


def _low_layer_probe(weights: ModelWeights, config: ModelConfig, cache: AssembledCache,
                     embeddings: np.ndarray | None, tally: FlopTally | None):
    """One full-attention pass through block 0, then fresh values at depth 1.

    Block-0 cache entries are exact (value/key projections of raw
    embeddings), so attending over the assembled entries reproduces the
    joint forward at that depth; the first depth where reuse can deviate is
    layer index 1, and that is where the value delta is measured. Returns
    (delta_v [s, kv_dim] float64, attention column sums [s] float64).
    """
    s = cache.context_length
    if embeddings is None:
        embeddings = weights.embed[cache.token_ids]
    elif embeddings.shape != (s, config.hidden_dim):
        raise ShapeError(f"embeddings shape {embeddings.shape}, expected {(s, config.hidden_dim)}")
    h = embeddings.copy()
    lw = weights.layers[0]
    x = rms_norm(h, lw.attn_norm, config.norm_eps)
    q_rot, _, _, _ = _project_qkv(lw, config, x, cache.positions, tally)
    k0, v0 = cache.layer_kv(0)
    h, rows, _ = _mix(lw, config, h, q_rot, k0, v0, cache.positions, cache.positions,
                      tally, want_rows=True)
    colsum = rows.astype(F64).sum(axis=0)
    if config.n_layers == 1:
        return np.zeros((s, config.kv_dim), dtype=F64), colsum
    lw1 = weights.layers[1]
    x1 = rms_norm(h, lw1.attn_norm, config.norm_eps)
    v1 = matmul(x1, lw1.wv, tally.total if tally else None)
    dv = v1.astype(F64) - cache.values[1].reshape(s, config.kv_dim).astype(F64)
    return dv, colsum


def score_cacheblend_l1(weights: ModelWeights, config: ModelConfig, cache: AssembledCache,
                        embeddings: np.ndarray | None = None,
                        tally: FlopTally | None = None) -> ValueScores:
    """Value-deviation magnitude from the low-layer probe: alpha = ||dV||_2."""
    dv, _ = _low_layer_probe(weights, config, cache, embeddings, tally)
    vec = np.linalg.norm(dv, axis=1)
    return ValueScores.from_vector("cacheblend_l1", vec, config.n_layers)


def score_kvshare_l1(weights: ModelWeights, config: ModelConfig, cache: AssembledCache,
                     embeddings: np.ndarray | None = None,
                     tally: FlopTally | None = None) -> ValueScores:
    """Attention column sums times ||dV||_1 from the same low-layer probe."""
    dv, colsum = _low_layer_probe(weights, config, cache, embeddings, tally)
    vec = colsum * np.abs(dv).sum(axis=1)
    return ValueScores.from_vector("kvshare_l1", vec, config.n_layers)


def score_random(s_context: int, seed: int, n_layers: int) -> ValueScores:
    """Uniform noise scores; the budget then samples tokens uniformly."""
    rng = np.random.default_rng(seed)
    return ValueScores.from_vector("random", rng.random(s_context), n_layers)


@dataclass
class IdealBreakdown:
    """Eq-by-eq view of the ideal value function and its factor expansion."""

    alpha: np.ndarray              # [s] aggregated ideal value per token
    alpha_expanded: np.ndarray     # [s] same value via the delta expansion
    abs_dphi: np.ndarray           # [s] |attention shift|
    phi_prime: np.ndarray          # [s] reuse-state attention mass
    v_prime_norm: np.ndarray       # [s] reuse-state value norm
    dv_norm: np.ndarray            # [s] value shift norm
    per_layer_ideal: np.ndarray    # [L, s] ideal value before layer aggregation


def score_ideal_oracle(full: AttnSummary, reuse: AttnSummary,
                       n_layers: int) -> tuple[ValueScores, IdealBreakdown]:
    """Oracle scores: the true per-token contribution shift between states.

    alpha(t) = || phi_t V_t - phi'_t V'_t ||_2 on layer-aggregated
    quantities; algebraically identical to
    || dphi_t V'_t + (phi'_t + dphi_t) dV_t ||_2, which the breakdown also
    returns factor by factor.
    """
    phi, v = full.phi, full.values
    phi_p, v_p = reuse.phi, reuse.values
    if phi.shape != phi_p.shape or v.shape != v_p.shape:
        raise ShapeError("full/reuse summaries cover different context shapes")
    contrib = phi[:, None] * v - phi_p[:, None] * v_p
    alpha = np.linalg.norm(contrib, axis=1)
    dphi = phi - phi_p
    dv = v - v_p
    expanded = dphi[:, None] * v_p + (phi_p + dphi)[:, None] * dv
    alpha_exp = np.linalg.norm(expanded, axis=1)
    per_layer = np.linalg.norm(
        full.per_layer_phi[:, :, None] * full.per_layer_values
        - reuse.per_layer_phi[:, :, None] * reuse.per_layer_values, axis=2)
    breakdown = IdealBreakdown(
        alpha=alpha, alpha_expanded=alpha_exp,
        abs_dphi=np.abs(dphi), phi_prime=phi_p.copy(),
        v_prime_norm=np.linalg.norm(v_p, axis=1),
        dv_norm=np.linalg.norm(dv, axis=1),
        per_layer_ideal=per_layer,
    )
    scores = ValueScores.from_vector("ideal_oracle", alpha, n_layers)
    return scores, breakdown


def scores_to_csv(scores: ValueScores, fh, header: bool = True) -> None:
    """Write one row per (layer, token): strategy, layer, token_index, score, fused_score."""
    if header:
        fh.write("strategy,layer,token_index,score,fused_score\n")
    n_layers, s = scores.per_layer.shape
    for li in range(n_layers):
        for t in range(s):
            fh.write(f"{scores.strategy},{li},{t},{scores.per_layer[li, t]:.8g},"
                     f"{scores.fused[t]:.8g}\n")

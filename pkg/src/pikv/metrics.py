"""Loss decomposition and overlap metrics against oracle traces.

All quantities live on layer-aggregated attention/value summaries: per
layer, attention is head-averaged and then query-averaged down to one mass
per context token; values keep their full KV width. Layers are aggregated
by uniform mean. Sums and norms run in float64, over context tokens only
(query tokens are always computed fresh and are never part of the
selection domain).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ArgumentError, ShapeError, StateError
from .model import (FlopTally, GenerationResult, ModelConfig, ModelWeights,
                    PrefillTrace, QueryPassResult, query_pass)
from .tensor import F64, ratio_budget, top_k_indices

if TYPE_CHECKING:  # pragma: no cover
    from .selection import ValueScores

# 21-point recompute-ratio grid: dense where convergence happens, coarse above.
DEFAULT_P_GRID: tuple[float, ...] = (
    0.0, 0.02, 0.04, 0.06, 0.08, 0.10, 0.12, 0.14, 0.16, 0.18, 0.20,
    0.25, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 0.95, 1.0,
)


@dataclass
class AttnSummary:
    """Layer-aggregated query attention and values over the context."""

    per_layer_phi: np.ndarray      # [L, s] float64
    per_layer_values: np.ndarray   # [L, s, kv_dim] float64
    phi: np.ndarray                # [s] float64, layer mean
    values: np.ndarray             # [s, kv_dim] float64, layer mean

    @classmethod
    def _from_parts(cls, phis: list[np.ndarray], values: list[np.ndarray]) -> "AttnSummary":
        pl_phi = np.stack([p.astype(F64) for p in phis])
        pl_val = np.stack([v.astype(F64) for v in values])
        return cls(per_layer_phi=pl_phi, per_layer_values=pl_val,
                   phi=pl_phi.mean(axis=0), values=pl_val.mean(axis=0))

    @classmethod
    def from_full_trace(cls, trace: PrefillTrace, n_ctx: int) -> "AttnSummary":
        """Ground-truth summary: query rows of a captured full prefill."""
        if trace.attn is None:
            raise StateError("full trace was captured without attention rows")
        n = trace.tokens.shape[0]
        if not 0 < n_ctx < n:
            raise ShapeError(f"context length {n_ctx} out of range for {n} tokens")
        phis, vals = [], []
        for rows, v in zip(trace.attn, trace.values):
            phis.append(rows[n_ctx:, :n_ctx].astype(F64).mean(axis=0))
            vals.append(v[:n_ctx].reshape(n_ctx, -1))
        return cls._from_parts(phis, vals)

    @classmethod
    def from_cache_pass(cls, weights: ModelWeights, config: ModelConfig,
                        kv_layers: list[tuple[np.ndarray, np.ndarray]],
                        positions: np.ndarray, query_tokens,
                        tally: FlopTally | None = None,
                        ) -> tuple["AttnSummary", QueryPassResult]:
        """Reuse-state summary: run the query over a cache and read its attention."""
        res = query_pass(weights, config, kv_layers, positions, query_tokens,
                         capture_attn=True, tally=tally)
        s = int(positions.shape[0])
        phis = [rows[:, :s].astype(F64).mean(axis=0) for rows in res.rows]
        vals = [kv[1].reshape(s, -1) for kv in kv_layers]
        return cls._from_parts(phis, vals), res


def semantic_loss(full: AttnSummary, reuse: AttnSummary) -> float:
    """L2 distance between the two states' total context attention outputs."""
    if full.values.shape != reuse.values.shape:
        raise ShapeError("summaries cover different context shapes")
    a = (full.phi[:, None] * full.values).sum(axis=0)
    b = (reuse.phi[:, None] * reuse.values).sum(axis=0)
    return float(np.linalg.norm(a - b))


def per_token_losses(full: AttnSummary, reuse: AttnSummary) -> np.ndarray:
    """Per-token contribution shift; its sum is the triangle upper bound."""
    if full.values.shape != reuse.values.shape:
        raise ShapeError("summaries cover different context shapes")
    diff = reuse.phi[:, None] * reuse.values - full.phi[:, None] * full.values
    return np.linalg.norm(diff, axis=1)


def residual_loss(per_token: np.ndarray, scores: "ValueScores", p: float) -> float:
    """Loss left behind by a budget-p selection: sum outside TOP_p(scores)."""
    s = per_token.shape[0]
    if scores.fused.shape[0] != s:
        raise ShapeError("scores and per-token losses cover different contexts")
    k = ratio_budget(p, s)
    keep = np.ones(s, dtype=bool)
    keep[top_k_indices(scores.fused, k)] = False
    return float(per_token[keep].sum())


def residual_curve(per_token: np.ndarray, scores: "ValueScores",
                   p_grid=DEFAULT_P_GRID) -> list[float]:
    return [residual_loss(per_token, scores, p) for p in p_grid]


@dataclass
class LossReport:
    semantic_loss: float
    upper_bound: float
    per_token_loss: np.ndarray
    residual_by_p: dict[float, float]


def build_loss_report(full: AttnSummary, reuse: AttnSummary, scores: "ValueScores",
                      p_grid=DEFAULT_P_GRID) -> LossReport:
    per_token = per_token_losses(full, reuse)
    return LossReport(
        semantic_loss=semantic_loss(full, reuse),
        upper_bound=float(per_token.sum()),
        per_token_loss=per_token,
        residual_by_p={p: residual_loss(per_token, scores, p) for p in p_grid},
    )


@dataclass
class OverlapReport:
    selection: list[int]
    reference: list[int]
    ratio: float


def overlap_ratio(selection, reference) -> float:
    """|S intersect G| / |G|."""
    g = set(int(i) for i in reference)
    if not g:
        raise ArgumentError("reference set must be non-empty")
    s = set(int(i) for i in selection)
    return len(s & g) / len(g)


def query_reference_set(trace: PrefillTrace, n_ctx: int, p: float) -> list[int]:
    """Top-p context tokens by full-prefill query attention (the ground-truth G)."""
    summary = AttnSummary.from_full_trace(trace, n_ctx)
    k = ratio_budget(p, n_ctx)
    return top_k_indices(summary.phi, k)


def decode_reference_set(gen: GenerationResult, n_ctx: int, p: float) -> list[int]:
    """Top-p context tokens by attention averaged over generated-token rows."""
    if gen.step_attn is None or not gen.step_attn:
        raise StateError("generation was run without attention capture or produced no tokens")
    acc = np.zeros(n_ctx, dtype=F64)
    count = 0
    for step_rows in gen.step_attn:
        for rows in step_rows:
            acc += rows[0, :n_ctx].astype(F64)
            count += 1
    k = ratio_budget(p, n_ctx)
    return top_k_indices(acc / count, k)

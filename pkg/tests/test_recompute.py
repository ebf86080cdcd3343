"""Stage-II repair: exactness at full budget, state machine, ablation, cost."""

import json

import numpy as np
import pytest

from pikv import (AnswerRecord, FlopTally, KVCache, RecomputePlan, StrategyRun,
                  ValueScores, assemble, finalize_query, full_prefill,
                  greedy_generate, precompute_chunk, recompute_selected,
                  run_strategy, select_top_p, selection_digest)
from pikv.errors import ArgumentError, ConfigError, StateError

UNITS = [[3, 17, 42, 0, 9, 31], [25, 7, 49, 13], [2, 38, 11, 29, 6]]
QUERY = [8, 19, 44, 1]
CONTEXT = [t for u in UNITS for t in u]


def fresh_cache(weights, config, units=UNITS):
    return assemble([precompute_chunk(weights, config, u) for u in units], config)


def all_selected(cache):
    scores = ValueScores.from_vector("x", np.arange(cache.context_length)[::-1],
                                     1)
    return select_top_p(scores, 1.0)


def test_full_budget_repair_reproduces_joint_forward(tiny_weights, tiny_cfg):
    cache = fresh_cache(tiny_weights, tiny_cfg)
    recompute_selected(tiny_weights, tiny_cfg, cache,
                       RecomputePlan(all_selected(cache)))
    trace = full_prefill(tiny_weights, tiny_cfg, CONTEXT)
    for li in range(tiny_cfg.n_layers):
        np.testing.assert_allclose(cache.keys_rebased[li], trace.keys[li],
                                   atol=1e-5)
        np.testing.assert_allclose(cache.values[li], trace.values[li], atol=1e-5)
    assert cache.recomputed.all()


def test_full_budget_answers_match_full_prefill(tiny_weights, tiny_cfg):
    cache = fresh_cache(tiny_weights, tiny_cfg)
    recompute_selected(tiny_weights, tiny_cfg, cache,
                       RecomputePlan(all_selected(cache)))
    fin = finalize_query(tiny_weights, tiny_cfg, cache, QUERY)
    trace = full_prefill(tiny_weights, tiny_cfg, CONTEXT + QUERY)
    np.testing.assert_allclose(fin.first_logits, trace.logits[-1], atol=1e-4)
    got = greedy_generate(tiny_weights, tiny_cfg, fin.cache, 6)
    want = greedy_generate(tiny_weights, tiny_cfg, KVCache.from_prefill(trace), 6)
    assert got.tokens == want.tokens


def test_zero_budget_is_a_no_op(tiny_weights, tiny_cfg):
    cache = fresh_cache(tiny_weights, tiny_cfg)
    before = [k.copy() for k in cache.keys_rebased]
    sel = select_top_p(ValueScores.from_vector("x", np.zeros(cache.context_length), 1),
                       0.0)
    out = recompute_selected(tiny_weights, tiny_cfg, cache, RecomputePlan(sel))
    assert out is cache
    assert not cache.recomputed.any()
    for li, k in enumerate(before):
        np.testing.assert_array_equal(cache.keys_rebased[li], k)


def test_repair_is_one_shot(tiny_weights, tiny_cfg):
    cache = fresh_cache(tiny_weights, tiny_cfg)
    plan = RecomputePlan(all_selected(cache))
    recompute_selected(tiny_weights, tiny_cfg, cache, plan)
    with pytest.raises(StateError):
        recompute_selected(tiny_weights, tiny_cfg, cache, plan)


def test_finalize_is_one_shot_and_blocks_repair(tiny_weights, tiny_cfg):
    cache = fresh_cache(tiny_weights, tiny_cfg)
    finalize_query(tiny_weights, tiny_cfg, cache, QUERY)
    with pytest.raises(StateError):
        finalize_query(tiny_weights, tiny_cfg, cache, QUERY)
    with pytest.raises(StateError):
        recompute_selected(tiny_weights, tiny_cfg, cache,
                           RecomputePlan(all_selected(cache)))


def test_selection_must_be_strictly_ascending(tiny_weights, tiny_cfg):
    from pikv import SelectionResult
    cache = fresh_cache(tiny_weights, tiny_cfg)
    bad = SelectionResult(indices=[3, 1], p=0.2, k=2)
    with pytest.raises(ArgumentError):
        recompute_selected(tiny_weights, tiny_cfg, cache, RecomputePlan(bad))


def test_repair_walks_layers_in_ascending_order(tiny_weights, tiny_cfg):
    chunks = [precompute_chunk(tiny_weights, tiny_cfg, u) for u in UNITS]
    cache = assemble(chunks, tiny_cfg, track_access=True)
    recompute_selected(tiny_weights, tiny_cfg, cache,
                       RecomputePlan(all_selected(cache)))
    writes = [layer for kind, layer in cache.access_log if kind == "write"]
    assert writes == list(range(tiny_cfg.n_layers))
    # each layer's joint attention reads the state written moments before
    for li in range(tiny_cfg.n_layers):
        w_at = cache.access_log.index(("write", li))
        r_at = cache.access_log.index(("read", li), w_at)
        assert r_at > w_at


def test_layer_zero_repair_agrees_with_rebased_entries(tiny_weights, tiny_cfg):
    # depth-0 K/V depend only on the token embedding and the position the
    # key was rotated to, so repairing them must be a near-identity
    cache = fresh_cache(tiny_weights, tiny_cfg)
    k0 = cache.keys_rebased[0].copy()
    v0 = cache.values[0].copy()
    k1 = cache.keys_rebased[1].copy()
    recompute_selected(tiny_weights, tiny_cfg, cache,
                       RecomputePlan(all_selected(cache)))
    np.testing.assert_allclose(cache.keys_rebased[0], k0, atol=1e-5)
    np.testing.assert_allclose(cache.values[0], v0, atol=1e-5)
    first = len(UNITS[0])
    # displaced chunks missed their true prefix, so depth-1 keys move
    assert np.abs(cache.keys_rebased[1][first:] - k1[first:]).max() > 1e-4


def test_stale_peer_ablation_changes_deep_values(task_weights, task_cfg):
    # peer freshness first matters inside depth-1 attention, so its trace
    # appears in the entries written at depth 2; needs >= 3 layers
    sel_idx = [len(UNITS[0]) + 1, len(UNITS[0]) + 2]  # two neighbours, chunk 1
    results = []
    for stale in (False, True):
        cache = fresh_cache(task_weights, task_cfg)
        from pikv import SelectionResult
        sel = SelectionResult(indices=sel_idx, p=0.2, k=2)
        recompute_selected(task_weights, task_cfg, cache,
                           RecomputePlan(sel, stale_peers=stale))
        results.append(cache.values[2][sel_idx].copy())
    fresh_vals, stale_vals = results
    # the first selected row has no repaired predecessor, so both modes agree
    np.testing.assert_allclose(fresh_vals[0], stale_vals[0], atol=1e-6)
    assert np.abs(fresh_vals[1] - stale_vals[1]).max() > 1e-7


def test_repair_flops_scale_linearly_with_selection_size(task_weights, task_cfg):
    units = [list(range(1, 25)), list(range(25, 49)), list(range(5, 21))]
    counts = {}
    for n_sel in (8, 16, 32):
        cache = assemble([precompute_chunk(task_weights, task_cfg, u)
                          for u in units], task_cfg)
        from pikv import SelectionResult
        sel = SelectionResult(indices=list(range(n_sel)), p=0.5, k=n_sel)
        tally = FlopTally()
        recompute_selected(task_weights, task_cfg, cache, RecomputePlan(sel),
                           tally=tally)
        counts[n_sel] = tally.total.multiply_accumulate_count
    r16 = counts[16] / counts[8]
    r32 = counts[32] / counts[16]
    assert abs(r16 - 2.0) < 0.02
    assert abs(r32 - 2.0) < 0.02


def test_run_strategy_returns_full_artifacts(task_weights, task_cfg):
    units = [[3, 17, 42, 0, 9], [31, 25, 7, 12], [49, 13, 2, 38]]
    chunks = [precompute_chunk(task_weights, task_cfg, u) for u in units]
    run = run_strategy(task_weights, task_cfg, chunks, QUERY, "prophet", 0.2,
                       task_id="t0")
    assert isinstance(run, StrategyRun)
    rec = run.record
    assert rec.strategy == "prophet" and rec.p == 0.2 and rec.task_id == "t0"
    s = sum(len(u) for u in units)
    assert run.per_token_naive.shape == (s,)
    assert rec.selected_indices == run.selection.indices
    assert rec.selection_digest == selection_digest(run.selection.indices)
    assert rec.exact_match is None and rec.answer_text == ""
    assert rec.flops_stage1 > 0 and rec.flops_stage2 > 0
    assert rec.semantic_loss >= 0.0 and rec.residual_loss >= 0.0


def test_run_strategy_full_budget_recovers_reference(task_weights, task_cfg):
    units = [[3, 17, 42, 0, 9], [31, 25, 7, 12], [49, 13, 2, 38]]
    chunks = [precompute_chunk(task_weights, task_cfg, u) for u in units]
    ctx = [t for u in units for t in u]
    run = run_strategy(task_weights, task_cfg, chunks, QUERY, "epic", 1.0)
    trace = full_prefill(task_weights, task_cfg, ctx + QUERY)
    want = greedy_generate(task_weights, task_cfg, KVCache.from_prefill(trace), 16)
    assert run.generated.tokens == want.tokens
    assert run.record.semantic_loss < 1e-4
    assert run.record.residual_loss == 0.0


def test_run_strategy_guards(task_weights, task_cfg):
    units = [[3, 17, 42], [31, 25, 7]]
    chunks = [precompute_chunk(task_weights, task_cfg, u) for u in units]
    with pytest.raises(ConfigError):
        run_strategy(task_weights, task_cfg, chunks, QUERY, "naive", 0.1)
    with pytest.raises(ArgumentError):
        run_strategy(task_weights, task_cfg, chunks, QUERY, "made_up", 0.1)


def test_naive_at_zero_budget_repairs_nothing(task_weights, task_cfg):
    units = [[3, 17, 42], [31, 25, 7]]
    chunks = [precompute_chunk(task_weights, task_cfg, u) for u in units]
    run = run_strategy(task_weights, task_cfg, chunks, QUERY, "naive", 0.0)
    assert run.record.selected_indices == []
    assert run.record.flops_stage1 == 0
    # residual at zero budget is the whole per-token mass
    assert run.record.residual_loss == pytest.approx(run.per_token_naive.sum())


def test_answer_record_json_schema():
    rec = AnswerRecord(task_id="t", strategy="prophet", p=0.2, answer_tokens=[1],
                       answer_text=" x", exact_match=True, semantic_loss=0.5,
                       residual_loss=0.25, flops_stage1=10, flops_stage2=20,
                       selected_indices=[0, 2], selection_digest="ab" * 8)
    keys = set(json.loads(rec.to_json_line()))
    assert keys == {"task_id", "strategy", "p", "answer_text", "exact_match",
                    "semantic_loss", "residual_loss", "flops_stage1",
                    "flops_stage2", "selected_digest"}


def test_selection_digest_is_order_free_and_stable():
    assert selection_digest([2, 0, 1]) == selection_digest([0, 1, 2])
    assert selection_digest([0, 1, 2]) != selection_digest([0, 1, 3])
    assert len(selection_digest([])) == 16

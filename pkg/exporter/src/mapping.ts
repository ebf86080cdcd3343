/**
 * Source-to-engine tensor name mapping.
 *
 * The source layout is the usual HF rotary-decoder naming; the engine
 * stores projection matrices input-major, so every 2-D weight is
 * transposed on the way through. The embedding stays token-major.
 */

import type { EngineConfig } from "./config.js";
import { SafetensorsFile, tensorF32 } from "./safetensors.js";

export interface MappingRow {
  source: string;
  engine: string;
  transpose: boolean;
}

export interface EngineTensor {
  name: string;
  shape: number[];
  data: Float32Array;
}

export function mappingTable(nLayers: number): MappingRow[] {
  const rows: MappingRow[] = [
    { source: "model.embed_tokens.weight", engine: "embed.weight", transpose: false },
  ];
  for (let i = 0; i < nLayers; i++) {
    const src = `model.layers.${i}.`;
    const dst = `layers.${i}.`;
    rows.push(
      { source: src + "input_layernorm.weight", engine: dst + "attn_norm.gain", transpose: false },
      { source: src + "self_attn.q_proj.weight", engine: dst + "attn.wq", transpose: true },
      { source: src + "self_attn.k_proj.weight", engine: dst + "attn.wk", transpose: true },
      { source: src + "self_attn.v_proj.weight", engine: dst + "attn.wv", transpose: true },
      { source: src + "self_attn.o_proj.weight", engine: dst + "attn.wo", transpose: true },
      { source: src + "post_attention_layernorm.weight", engine: dst + "ffn_norm.gain", transpose: false },
      { source: src + "mlp.gate_proj.weight", engine: dst + "ffn.w_gate", transpose: true },
      { source: src + "mlp.up_proj.weight", engine: dst + "ffn.w_up", transpose: true },
      { source: src + "mlp.down_proj.weight", engine: dst + "ffn.w_down", transpose: true },
    );
  }
  rows.push(
    { source: "model.norm.weight", engine: "final_norm.gain", transpose: false },
    { source: "lm_head.weight", engine: "lm_head.weight", transpose: true },
  );
  return rows;
}

function transposed(data: Float32Array, rows: number, cols: number): Float32Array {
  const out = new Float32Array(data.length);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      out[c * rows + r] = data[r * cols + c];
    }
  }
  return out;
}

/**
 * Resolve every engine tensor exactly once, in the engine's canonical
 * file order. Unknown leftovers and missing sources are both errors so
 * an architecture drift never exports silently.
 */
export function resolveTensors(file: SafetensorsFile, cfg: EngineConfig): EngineTensor[] {
  const rows = mappingTable(cfg.n_layers);
  const missing = rows.filter((r) => !file.tensors.has(r.source)).map((r) => r.source);
  const claimed = new Set(rows.map((r) => r.source));
  const leftover = [...file.tensors.keys()].filter((n) => !claimed.has(n));
  if (missing.length > 0 || leftover.length > 0) {
    const parts = [];
    if (missing.length > 0) parts.push(`missing: ${missing.join(", ")}`);
    if (leftover.length > 0) parts.push(`unmapped: ${leftover.join(", ")}`);
    throw new Error(`unsupported architecture; ${parts.join("; ")}`);
  }
  return rows.map((row) => {
    const info = file.tensors.get(row.source)!;
    let data = tensorF32(file, row.source);
    let shape = info.shape.slice();
    if (row.transpose) {
      if (shape.length !== 2) {
        throw new Error(`mapping: ${row.source} must be 2-D to transpose, got ${shape}`);
      }
      data = transposed(data, shape[0], shape[1]);
      shape = [shape[1], shape[0]];
    }
    return { name: row.engine, shape, data };
  });
}

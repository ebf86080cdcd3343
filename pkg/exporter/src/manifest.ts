/**
 * Export manifest: what was converted, how names were mapped, and the
 * reference logits (top 5 per position) used to cross-check the engine.
 */

import type { EngineConfig } from "./config.js";
import type { MappingRow } from "./mapping.js";
import type { TinyDecoder } from "./forward.js";
import type { Tokenizer } from "./tokenizer.js";

export interface PromptSpec {
  name: string;
  text: string;
}

/** One [token id, logit] pair; the reference stores five per position. */
export type ScoredToken = [number, number];

export interface PromptReference {
  name: string;
  text: string;
  tokens: number[];
  // top5[pos] lists the five highest-logit token ids at that position,
  // descending by logit, ties broken toward the smaller id
  top5: ScoredToken[][];
}

export interface ExportManifest {
  version: 1;
  source: string;
  fingerprint: string;
  config: EngineConfig;
  mapping: MappingRow[];
  prompts: PromptReference[];
}

export function topK(row: Float32Array, k: number): ScoredToken[] {
  const order = Array.from(row.keys()).sort((a, b) => row[b] - row[a] || a - b);
  return order.slice(0, k).map((id) => [id, row[id]]);
}

export function buildReference(
  decoder: TinyDecoder,
  tokenizer: Tokenizer,
  prompts: PromptSpec[],
): PromptReference[] {
  return prompts.map((spec) => {
    const tokens = tokenizer.encode(spec.text);
    if (tokens.length === 0) {
      throw new Error(`prompt ${spec.name} tokenized to nothing`);
    }
    const logits = decoder.logits(tokens);
    return {
      name: spec.name,
      text: spec.text,
      tokens,
      top5: logits.map((row) => topK(row, 5)),
    };
  });
}

export function parsePrompts(text: string): PromptSpec[] {
  const doc = JSON.parse(text) as { version?: number; prompts?: unknown };
  if (doc.version !== 1 || !Array.isArray(doc.prompts)) {
    throw new Error("unsupported prompts file");
  }
  return (doc.prompts as PromptSpec[]).map((p) => {
    if (typeof p.name !== "string" || typeof p.text !== "string") {
      throw new Error("prompt entries need a name and a text");
    }
    return { name: p.name, text: p.text };
  });
}

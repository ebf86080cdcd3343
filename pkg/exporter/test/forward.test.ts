import { beforeAll, describe, expect, it } from "vitest";
import * as fs from "node:fs";
import * as path from "node:path";
import { fromHuggingFace, type EngineConfig } from "../src/config.js";
import { TinyDecoder } from "../src/forward.js";
import { resolveTensors } from "../src/mapping.js";
import { topK } from "../src/manifest.js";
import { parseSafetensors } from "../src/safetensors.js";
import { Tokenizer } from "../src/tokenizer.js";
import { FIXTURES } from "./helpers.js";

let cfg: EngineConfig;
let decoder: TinyDecoder;
let tok: Tokenizer;

beforeAll(() => {
  cfg = fromHuggingFace(JSON.parse(
    fs.readFileSync(path.join(FIXTURES, "config.json"), "utf8")));
  const file = parseSafetensors(fs.readFileSync(path.join(FIXTURES, "model.safetensors")));
  decoder = new TinyDecoder(cfg, resolveTensors(file, cfg));
  tok = Tokenizer.fromTableJson(
    fs.readFileSync(path.join(FIXTURES, "tokenizer.json"), "utf8"));
});

describe("TinyDecoder", () => {
  it("produces one finite logit row per position", () => {
    const ids = tok.encode("Alice stays in John's house on Monday.");
    const logits = decoder.logits(ids);
    expect(logits.length).toBe(ids.length);
    for (const row of logits) {
      expect(row.length).toBe(cfg.vocab_size);
      expect(Array.from(row).every(Number.isFinite)).toBe(true);
    }
  });

  it("is causal: a position's logits ignore later tokens", () => {
    const ids = tok.encode("The special magic number for apples is 101.");
    const full = decoder.logits(ids);
    const half = decoder.logits(ids.slice(0, 5));
    for (let t = 0; t < 5; t++) {
      // identical op order for prefix positions, so bitwise equal
      expect(Array.from(half[t])).toEqual(Array.from(full[t]));
    }
  });

  it("rejects out-of-vocabulary ids", () => {
    expect(() => decoder.logits([0, cfg.vocab_size])).toThrowError(/outside vocab/);
  });
});

describe("topK", () => {
  it("orders by logit, breaking ties toward the smaller id", () => {
    const row = new Float32Array([1.0, 3.0, 3.0, -2.0, 0.5]);
    expect(topK(row, 3)).toEqual([[1, 3.0], [2, 3.0], [0, 1.0]]);
  });
});

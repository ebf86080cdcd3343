import { describe, expect, it } from "vitest";
import * as fs from "node:fs";
import * as path from "node:path";
import { parseSafetensors, tensorF32 } from "../src/safetensors.js";
import { FIXTURES, syntheticSafetensors } from "./helpers.js";

describe("parseSafetensors", () => {
  it("reads the trained fixture", () => {
    const cfg = JSON.parse(fs.readFileSync(path.join(FIXTURES, "config.json"), "utf8"));
    const file = parseSafetensors(fs.readFileSync(path.join(FIXTURES, "model.safetensors")));
    expect(file.tensors.size).toBe(3 + 9 * cfg.num_hidden_layers);

    const embed = file.tensors.get("model.embed_tokens.weight");
    expect(embed?.shape).toEqual([cfg.vocab_size, cfg.hidden_size]);

    const k = file.tensors.get("model.layers.0.self_attn.k_proj.weight");
    expect(k?.shape).toEqual([cfg.num_key_value_heads * cfg.head_dim, cfg.hidden_size]);

    const data = tensorF32(file, "model.norm.weight");
    expect(data.length).toBe(cfg.hidden_size);
    expect(Array.from(data).every(Number.isFinite)).toBe(true);
  });

  it("round-trips a synthetic file", () => {
    const buf = syntheticSafetensors([
      { name: "a", shape: [2, 3], fill: (i) => i + 0.5 },
      { name: "b", shape: [4], fill: (i) => -i },
    ]);
    const file = parseSafetensors(buf);
    expect(Array.from(tensorF32(file, "a"))).toEqual([0.5, 1.5, 2.5, 3.5, 4.5, 5.5]);
    expect(Array.from(tensorF32(file, "b"))).toEqual([-0, -1, -2, -3]);
  });

  it("rejects truncated payloads and wrong dtypes", () => {
    const buf = syntheticSafetensors([{ name: "a", shape: [2, 2] }]);
    expect(() => parseSafetensors(buf.subarray(0, buf.length - 4))).toThrow();

    const hj = buf.subarray(8, 8 + Number(buf.readBigUInt64LE(0))).toString("utf8");
    // same byte length, so only the dtype field changes
    const patched = Buffer.concat([
      buf.subarray(0, 8), Buffer.from(hj.replace('"F32"', '"F16"')),
      buf.subarray(8 + hj.length),
    ]);
    expect(() => parseSafetensors(patched)).toThrowError(/F16/);
  });
});

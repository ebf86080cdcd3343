import * as path from "node:path";
import { fileURLToPath } from "node:url";

const here = path.dirname(fileURLToPath(import.meta.url));

/** exporter/fixtures: the trained source checkpoint used across suites */
export const FIXTURES = path.join(here, "..", "fixtures");

/** the engine's own copy of the same model, written by its trainer */
export const ENGINE_PKVM = path.join(here, "..", "..", "tests", "fixtures", "tiny_rag.pkvm");

export const PROMPTS = path.join(here, "..", "prompts", "reference_prompts.json");

export function syntheticSafetensors(
  entries: Array<{ name: string; shape: number[]; fill?: (i: number) => number }>,
): Buffer {
  const header: Record<string, unknown> = {};
  const chunks: Buffer[] = [];
  let off = 0;
  for (const e of entries) {
    const n = e.shape.reduce((a, b) => a * b, 1);
    const arr = new Float32Array(n);
    for (let i = 0; i < n; i++) arr[i] = e.fill ? e.fill(i) : 0;
    const data = Buffer.from(arr.buffer);
    header[e.name] = { dtype: "F32", shape: e.shape, data_offsets: [off, off + data.length] };
    chunks.push(data);
    off += data.length;
  }
  const hj = Buffer.from(JSON.stringify(header), "utf8");
  const frame = Buffer.alloc(8);
  frame.writeBigUInt64LE(BigInt(hj.length));
  return Buffer.concat([frame, hj, ...chunks]);
}

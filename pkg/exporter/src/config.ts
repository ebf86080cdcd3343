/** Engine-side architecture description and its canonical JSON encoding. */

export interface EngineConfig {
  n_layers: number;
  n_heads: number;
  n_kv_heads: number;
  head_dim: number;
  hidden_dim: number;
  ffn_dim: number;
  vocab_size: number;
  rope_theta: number;
  norm_eps: number;
}

const HF_KEYS: Array<[keyof EngineConfig, string]> = [
  ["n_layers", "num_hidden_layers"],
  ["n_heads", "num_attention_heads"],
  ["n_kv_heads", "num_key_value_heads"],
  ["head_dim", "head_dim"],
  ["hidden_dim", "hidden_size"],
  ["ffn_dim", "intermediate_size"],
  ["vocab_size", "vocab_size"],
  ["rope_theta", "rope_theta"],
  ["norm_eps", "rms_norm_eps"],
];

export function fromHuggingFace(raw: Record<string, unknown>): EngineConfig {
  const missing = HF_KEYS.filter(([, hf]) => typeof raw[hf] !== "number");
  if (missing.length > 0) {
    throw new Error(
      `config: missing or non-numeric keys: ${missing.map(([, hf]) => hf).join(", ")}`);
  }
  const cfg = {} as EngineConfig;
  for (const [ours, hf] of HF_KEYS) {
    cfg[ours] = raw[hf] as number;
  }
  if (cfg.n_heads % cfg.n_kv_heads !== 0) {
    throw new Error(`config: ${cfg.n_heads} heads not divisible by ${cfg.n_kv_heads} KV heads`);
  }
  if (cfg.n_heads * cfg.head_dim !== cfg.hidden_dim) {
    throw new Error(
      `config: heads*head_dim = ${cfg.n_heads * cfg.head_dim} != hidden ${cfg.hidden_dim}`);
  }
  return cfg;
}

/**
 * Render a float the way CPython's repr does: shortest round-trip form,
 * positional for exponents in [-4, 16), otherwise scientific with a
 * two-digit exponent, and a trailing ".0" on integral values.
 *
 * The fingerprint hashes this exact text, so divergence here breaks
 * cross-runtime verification.
 */
export function pyFloatRepr(x: number): string {
  if (!Number.isFinite(x)) {
    return x > 0 ? "inf" : x < 0 ? "-inf" : "nan";
  }
  if (x === 0) return Object.is(x, -0) ? "-0.0" : "0.0";
  const exp = x.toExponential(); // shortest digits JS can round-trip
  const m = exp.match(/^(-?)(\d)(?:\.(\d+))?e([+-]\d+)$/);
  if (!m) return String(x);
  const [, sign, lead, frac = "", expStr] = m;
  const e = parseInt(expStr, 10);
  if (e < -4 || e >= 16) {
    const mantissa = frac ? `${lead}.${frac}` : `${lead}`;
    const absExp = String(Math.abs(e)).padStart(2, "0");
    return `${sign}${mantissa}e${e < 0 ? "-" : "+"}${absExp}`;
  }
  const digits = lead + frac;
  let out: string;
  if (e >= frac.length) {
    out = digits + "0".repeat(e - frac.length) + ".0";
  } else if (e >= 0) {
    out = digits.slice(0, e + 1) + "." + digits.slice(e + 1);
  } else {
    out = "0." + "0".repeat(-e - 1) + digits;
  }
  return sign + out;
}

/** Key-sorted config JSON, byte-identical to the engine's own encoding. */
export function canonicalConfigJson(cfg: EngineConfig): string {
  const keys = Object.keys(cfg).sort() as Array<keyof EngineConfig>;
  const ints = new Set(["n_layers", "n_heads", "n_kv_heads", "head_dim",
    "hidden_dim", "ffn_dim", "vocab_size"]);
  const parts = keys.map((k) => {
    const v = cfg[k];
    const lit = ints.has(k) ? String(v) : pyFloatRepr(v);
    return `"${k}": ${lit}`;
  });
  return `{${parts.join(", ")}}`;
}

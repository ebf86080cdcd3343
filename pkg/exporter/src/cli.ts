/**
 * Command line entry point.
 *
 *   pkvm-export export --source <dir> --out <dir> [--prompts <file>]
 *
 * The source directory must hold model.safetensors, config.json and
 * tokenizer.json. The output directory receives model.pkvm, the tokenizer
 * table, and manifest.json with the reference logits.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { parseArgs } from "node:util";
import { fileURLToPath } from "node:url";

import { fromHuggingFace } from "./config.js";
import { TinyDecoder } from "./forward.js";
import { mappingTable, resolveTensors } from "./mapping.js";
import { buildReference, parsePrompts, type ExportManifest } from "./manifest.js";
import { buildModelFile, fingerprint } from "./pkvm.js";
import { parseSafetensors } from "./safetensors.js";
import { Tokenizer } from "./tokenizer.js";

export interface ExportResult {
  manifest: ExportManifest;
  modelPath: string;
  manifestPath: string;
}

export function runExport(sourceDir: string, outDir: string, promptsPath: string): ExportResult {
  const read = (name: string) => {
    const p = path.join(sourceDir, name);
    if (!fs.existsSync(p)) throw new Error(`source is missing ${name}`);
    return fs.readFileSync(p);
  };

  const cfg = fromHuggingFace(JSON.parse(read("config.json").toString("utf8")));
  const file = parseSafetensors(read("model.safetensors"));
  const tensors = resolveTensors(file, cfg);
  const tokenizer = Tokenizer.fromTableJson(read("tokenizer.json").toString("utf8"));
  if (tokenizer.vocabSize !== cfg.vocab_size) {
    throw new Error(
      `tokenizer table has ${tokenizer.vocabSize} entries, config says ${cfg.vocab_size}`);
  }

  const prompts = parsePrompts(fs.readFileSync(promptsPath, "utf8"));
  const decoder = new TinyDecoder(cfg, tensors);

  const manifest: ExportManifest = {
    version: 1,
    source: path.basename(path.resolve(sourceDir)),
    fingerprint: fingerprint(cfg, tensors),
    config: cfg,
    mapping: mappingTable(cfg.n_layers),
    prompts: buildReference(decoder, tokenizer, prompts),
  };

  fs.mkdirSync(outDir, { recursive: true });
  const modelPath = path.join(outDir, "model.pkvm");
  fs.writeFileSync(modelPath, buildModelFile(cfg, tensors));
  fs.writeFileSync(
    path.join(outDir, "tokenizer.json"),
    JSON.stringify({ version: 1, tokens: tokenizer.tokens }),
  );
  const manifestPath = path.join(outDir, "manifest.json");
  fs.writeFileSync(manifestPath, JSON.stringify(manifest, null, 2));
  return { manifest, modelPath, manifestPath };
}

function main(argv: string[]): number {
  const [command, ...rest] = argv;
  if (command !== "export") {
    console.error("usage: pkvm-export export --source <dir> --out <dir> [--prompts <file>]");
    return 2;
  }
  const { values } = parseArgs({
    args: rest,
    options: {
      source: { type: "string" },
      out: { type: "string" },
      prompts: { type: "string" },
    },
  });
  if (!values.source || !values.out) {
    console.error("export needs --source and --out");
    return 2;
  }
  const here = path.dirname(fileURLToPath(import.meta.url));
  const prompts = values.prompts ?? path.join(here, "..", "prompts", "reference_prompts.json");
  const res = runExport(values.source, values.out, prompts);
  console.log(`wrote ${res.modelPath} (fingerprint ${res.manifest.fingerprint})`);
  console.log(`wrote ${res.manifestPath} with ${res.manifest.prompts.length} reference prompts`);
  return 0;
}

const invokedDirectly = process.argv[1] &&
  path.resolve(process.argv[1]) === fileURLToPath(import.meta.url);
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}

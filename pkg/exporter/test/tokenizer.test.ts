import { describe, expect, it } from "vitest";
import * as fs from "node:fs";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { EOS_TOKEN, Tokenizer } from "../src/tokenizer.js";

const here = path.dirname(fileURLToPath(import.meta.url));
const tablePath = path.join(here, "..", "fixtures", "tokenizer.json");

function fixtureTokenizer(): Tokenizer {
  return Tokenizer.fromTableJson(fs.readFileSync(tablePath, "utf8"));
}

describe("Tokenizer", () => {
  it("round-trips text from the fixture table", () => {
    const tok = fixtureTokenizer();
    const text = "Alice stays in John's house on Monday.\nAnswer: London";
    const ids = tok.encode(text);
    expect(ids.length).toBeGreaterThan(0);
    // decode re-inserts the leading space on each word
    expect(tok.decode(ids)).toBe(
      " Alice stays in John's house on Monday.\n Answer: London");
    expect(tok.encode(tok.decode(ids))).toEqual(ids);
  });

  it("keeps punctuation and newlines as bare tokens", () => {
    const tok = fixtureTokenizer();
    const ids = tok.encode("is.\n?");
    expect(ids.map((i) => tok.tokens[i])).toEqual([" is", ".", "\n", "?"]);
  });

  it("rejects words outside the vocabulary", () => {
    const tok = fixtureTokenizer();
    expect(() => tok.encode("xylophone")).toThrowError(/not in the vocabulary/);
  });

  it("knows its end-of-answer id", () => {
    const tok = fixtureTokenizer();
    expect(tok.tokens[tok.eosId]).toBe(EOS_TOKEN);
  });

  it("rejects malformed tables", () => {
    expect(() => Tokenizer.fromTableJson('{"version": 2, "tokens": []}')).toThrow();
    expect(() => new Tokenizer(["a", "a", EOS_TOKEN])).toThrowError(/duplicates/);
    expect(() => new Tokenizer(["a", "b"])).toThrowError(/end-of-answer/);
  });
});

/**
 * Closed-vocabulary word tokenizer, mirroring the engine's table format.
 *
 * Pieces are newlines, runs of [A-Za-z0-9'], or single punctuation marks.
 * Words are stored with a leading space; punctuation and newline are bare.
 */

const PIECES = /\n|[A-Za-z0-9']+|[.,?:]/g;
const PUNCT = new Set([".", ",", "?", ":", "\n"]);
export const EOS_TOKEN = "<eos>";

export class Tokenizer {
  readonly tokens: string[];
  private ids: Map<string, number>;

  constructor(tokens: string[]) {
    this.tokens = [...tokens];
    this.ids = new Map(this.tokens.map((t, i) => [t, i]));
    if (this.ids.size !== this.tokens.length) {
      throw new Error("token table contains duplicates");
    }
    if (!this.ids.has(EOS_TOKEN)) {
      throw new Error("token table is missing the end-of-answer token");
    }
  }

  static fromTableJson(text: string): Tokenizer {
    const doc = JSON.parse(text) as { version?: number; tokens?: unknown };
    if (doc.version !== 1 || !Array.isArray(doc.tokens)) {
      throw new Error("unsupported tokenizer table");
    }
    return new Tokenizer(doc.tokens as string[]);
  }

  get vocabSize(): number {
    return this.tokens.length;
  }

  get eosId(): number {
    return this.ids.get(EOS_TOKEN)!;
  }

  encode(text: string): number[] {
    const out: number[] = [];
    for (const piece of text.match(PIECES) ?? []) {
      const tok = PUNCT.has(piece) ? piece : " " + piece;
      const id = this.ids.get(tok);
      if (id === undefined) {
        throw new Error(`token ${JSON.stringify(piece)} is not in the vocabulary`);
      }
      out.push(id);
    }
    return out;
  }

  decode(ids: number[]): string {
    return ids.map((i) => {
      const tok = this.tokens[i];
      if (tok === undefined) throw new Error(`token id ${i} outside table`);
      return tok;
    }).join("");
  }
}

/**
 * Whitespace tokenizer over the linearized-row corpus format.
 *
 * Lines look like:
 *   <table> drivers <attr> surname <value> Hamilton <attr> code <value>
 * The structural markers and the mask token are first-class vocabulary
 * entries; everything else is learned from the corpus.
 */

export const PAD = "<pad>";
export const UNK = "<unk>";
export const TABLE_TOKEN = "<table>";
export const ATTR_TOKEN = "<attr>";
export const VALUE_TOKEN = "<value>";
export const MASK_TOKEN = "<mask>";

export const SPECIAL_TOKENS = [PAD, UNK, TABLE_TOKEN, ATTR_TOKEN, VALUE_TOKEN, MASK_TOKEN];

export const MAX_SEQ_LEN = 1024;

export function tokenize(line: string): string[] {
  const trimmed = line.trim();
  return trimmed.length === 0 ? [] : trimmed.split(/\s+/);
}

export class Vocabulary {
  readonly tokens: string[] = [];
  private readonly ids = new Map<string, number>();

  constructor(tokens: Iterable<string> = []) {
    for (const tok of SPECIAL_TOKENS) this.add(tok);
    for (const tok of tokens) this.add(tok);
  }

  static fromLines(lines: string[]): Vocabulary {
    const vocab = new Vocabulary();
    for (const line of lines) {
      for (const tok of tokenize(line)) vocab.add(tok);
    }
    return vocab;
  }

  get size(): number {
    return this.tokens.length;
  }

  add(token: string): number {
    let id = this.ids.get(token);
    if (id === undefined) {
      id = this.tokens.length;
      this.tokens.push(token);
      this.ids.set(token, id);
    }
    return id;
  }

  id(token: string): number {
    return this.ids.get(token) ?? this.ids.get(UNK)!;
  }

  /** Encode a line, truncating at maxLen tokens. */
  encode(line: string, maxLen = MAX_SEQ_LEN): { ids: number[]; truncated: boolean } {
    const toks = tokenize(line);
    const truncated = toks.length > maxLen;
    if (truncated) {
      console.warn(`line truncated from ${toks.length} to ${maxLen} tokens`);
    }
    return { ids: toks.slice(0, maxLen).map((t) => this.id(t)), truncated };
  }
}

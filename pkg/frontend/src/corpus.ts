/**
 * Corpus parsing and schema-aware masking.
 *
 * A linearized row decomposes into semantic units: the table name, each
 * attribute name, and each cell value. Units are masked independently with
 * category probabilities (table 0.30, attr 0.20, value 0.40); empty values
 * are never masked, and at least one unit is always masked per row.
 */

import { readFileSync } from "node:fs";
import { join } from "node:path";
import { Rng } from "./rng.js";
import { ATTR_TOKEN, MASK_TOKEN, TABLE_TOKEN, VALUE_TOKEN } from "./tokenizer.js";

export type UnitCategory = "table" | "attr" | "value";

export interface UnitSpan {
  category: UnitCategory;
  /** Payload tokens following the marker; empty for an absent value. */
  tokens: string[];
}

export const MASK_PROBS: Record<UnitCategory, number> = {
  table: 0.3,
  attr: 0.2,
  value: 0.4,
};

const MARKERS: Record<string, UnitCategory> = {
  [TABLE_TOKEN]: "table",
  [ATTR_TOKEN]: "attr",
  [VALUE_TOKEN]: "value",
};

export function parseUnits(line: string): UnitSpan[] {
  const units: UnitSpan[] = [];
  for (const tok of line.trim().split(/\s+/)) {
    const category = MARKERS[tok];
    if (category !== undefined) {
      units.push({ category, tokens: [] });
    } else {
      if (units.length === 0) {
        throw new Error(`corpus line does not start with a marker: ${line.slice(0, 40)}`);
      }
      units[units.length - 1].tokens.push(tok);
    }
  }
  return units;
}

export function renderUnits(units: UnitSpan[], masked: Set<number> = new Set()): string {
  const lexemes: string[] = [];
  units.forEach((unit, i) => {
    lexemes.push(
      unit.category === "table" ? TABLE_TOKEN : unit.category === "attr" ? ATTR_TOKEN : VALUE_TOKEN,
    );
    if (masked.has(i)) {
      lexemes.push(MASK_TOKEN);
    } else {
      lexemes.push(...unit.tokens);
    }
  });
  return lexemes.join(" ");
}

export function maskableIndices(units: UnitSpan[]): number[] {
  const out: number[] = [];
  units.forEach((unit, i) => {
    if (unit.category !== "value" || unit.tokens.length > 0) out.push(i);
  });
  return out;
}

/** Independent per-unit draws with a uniform fallback so >=1 unit is masked. */
export function sampleMaskPlan(units: UnitSpan[], rng: Rng): Set<number> {
  const candidates = maskableIndices(units);
  if (candidates.length === 0) {
    throw new Error("row has no maskable units");
  }
  const masked = new Set<number>();
  for (const i of candidates) {
    if (rng.random() < MASK_PROBS[units[i].category]) masked.add(i);
  }
  if (masked.size === 0) {
    masked.add(candidates[rng.int(candidates.length)]);
  }
  return masked;
}

export function readLines(path: string): string[] {
  return readFileSync(path, "utf-8")
    .split("\n")
    .filter((line) => line.length > 0);
}

/** Table name of a corpus line (payload of its leading <table> unit). */
export function tableOf(line: string): string {
  const units = parseUnits(line);
  if (units.length === 0 || units[0].category !== "table" || units[0].tokens.length === 0) {
    throw new Error(`corpus line has no table name: ${line.slice(0, 40)}`);
  }
  return units[0].tokens.join(" ");
}

export interface SplitCorpus {
  train: string[];
  validMasked: string[];
  validTarget: string[];
}

/** Load the train/validation corpus layout written by the primary engine. */
export function loadSplitCorpus(dir: string): SplitCorpus {
  return {
    train: readLines(join(dir, "train.txt")),
    validMasked: readLines(join(dir, "valid.masked.txt")),
    validTarget: readLines(join(dir, "valid.target.txt")),
  };
}

#!/usr/bin/env node
/**
 * embed-export: encode a linearized-row corpus into a REMB embedding file,
 * optionally fine-tuning the encoder on a masked corpus first.
 *
 *   embed-export export --corpus rows.txt --checkpoint stock-64 --out feats.remb
 *   embed-export export --corpus rows.txt --checkpoint ckpt.json --out feats.remb \
 *       --finetune --corpus-dir corpus/ --epochs 50 --batch 128
 */

import { parseArgs } from "node:util";
import { dirname, join } from "node:path";
import { existsSync } from "node:fs";
import { FINETUNE_DEFAULTS, encodeCorpus, finetune, resolveCheckpoint } from "./export.js";
import { loadSplitCorpus, readLines } from "./corpus.js";

const USAGE = `usage: embed-export export --corpus <rows.txt> --checkpoint <id> --out <file.remb>
           [--finetune] [--corpus-dir <dir>] [--epochs N] [--batch N]
           [--accum-steps N] [--lr F] [--seed N] [--max-len N]
           [--save-checkpoint <path>]

checkpoint ids: a JSON checkpoint path, or stock-<dim> for a fresh seeded model.`;

export function main(argv: string[]): number {
  if (argv[0] !== "export") {
    console.error(USAGE);
    return argv[0] === "--help" || argv[0] === "-h" ? 0 : 1;
  }
  const { values } = parseArgs({
    args: argv.slice(1),
    options: {
      corpus: { type: "string" },
      checkpoint: { type: "string", default: "stock-64" },
      out: { type: "string" },
      finetune: { type: "boolean", default: false },
      "corpus-dir": { type: "string" },
      epochs: { type: "string", default: String(FINETUNE_DEFAULTS.epochs) },
      batch: { type: "string", default: String(FINETUNE_DEFAULTS.batchSize) },
      "accum-steps": { type: "string", default: String(FINETUNE_DEFAULTS.accumSteps) },
      lr: { type: "string", default: String(FINETUNE_DEFAULTS.lr) },
      seed: { type: "string", default: "0" },
      "max-len": { type: "string", default: String(FINETUNE_DEFAULTS.maxLen) },
      "save-checkpoint": { type: "string" },
    },
  });
  if (!values.corpus || !values.out) {
    console.error(USAGE);
    return 1;
  }
  const seed = parseInt(values.seed!, 10);
  const corpusLines = readLines(values.corpus);

  let vocabLines = corpusLines;
  const corpusDir = values["corpus-dir"] ?? dirname(values.corpus);
  if (values.finetune) {
    if (!existsSync(join(corpusDir, "train.txt"))) {
      console.error(`--finetune: no train.txt under ${corpusDir} (use --corpus-dir)`);
      return 1;
    }
    const split = loadSplitCorpus(corpusDir);
    vocabLines = corpusLines.concat(split.train, split.validTarget);
  }

  const model = resolveCheckpoint(values.checkpoint!, vocabLines, seed);

  if (values.finetune) {
    const result = finetune(model, corpusDir, {
      epochs: parseInt(values.epochs!, 10),
      batchSize: parseInt(values.batch!, 10),
      accumSteps: parseInt(values["accum-steps"]!, 10),
      lr: parseFloat(values.lr!),
      warmupFraction: FINETUNE_DEFAULTS.warmupFraction,
      seed,
      maxLen: parseInt(values["max-len"]!, 10),
    });
    console.log(`fine-tune: ${result.stepLosses.length} steps, best val loss ${result.bestValLoss.toFixed(4)}`);
    if (values["save-checkpoint"]) {
      model.save(values["save-checkpoint"]);
    }
  }

  const blocks = encodeCorpus(model, values.corpus, values.out, parseInt(values["max-len"]!, 10));
  const total = blocks.reduce((n, b) => n + b.rows, 0);
  console.log(`wrote ${values.out}: ${total} rows, dim ${model.dim}, tables ${blocks.map((b) => b.table).join(",")}`);
  return 0;
}

if (process.argv[1] && import.meta.url.endsWith(process.argv[1].split("/").pop()!)) {
  process.exit(main(process.argv.slice(2)));
}

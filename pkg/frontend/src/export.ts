/**
 * Export jobs: optional reconstruction fine-tuning on a masked corpus,
 * then encoding a full-order corpus file into a REMB embedding file.
 */

import { Rng } from "./rng.js";
import { loadSplitCorpus, parseUnits, readLines, renderUnits, sampleMaskPlan, tableOf } from "./corpus.js";
import { AdamW, Denoiser } from "./model.js";
import { MAX_SEQ_LEN, Vocabulary } from "./tokenizer.js";
import { RembBlock, writeRemb } from "./remb.js";

export interface FinetuneOptions {
  epochs: number;
  batchSize: number;
  /** Gradient-accumulation steps making up one effective batch. */
  accumSteps: number;
  lr: number;
  warmupFraction: number;
  seed: number;
  maxLen: number;
}

export const FINETUNE_DEFAULTS: FinetuneOptions = {
  epochs: 50,
  batchSize: 128,
  accumSteps: 1,
  lr: 3e-3,
  warmupFraction: 0.1,
  seed: 0,
  maxLen: MAX_SEQ_LEN,
};

export interface FinetuneResult {
  /** Mean train loss per optimizer step, in order. */
  stepLosses: number[];
  /** Validation loss after each epoch (static masks). */
  valLosses: number[];
  bestValLoss: number;
}

function encodePair(model: Denoiser, masked: string, target: string, maxLen: number) {
  return {
    input: model.vocab.encode(masked, maxLen).ids,
    target: model.vocab.encode(target, maxLen).ids,
  };
}

export function evaluateVal(model: Denoiser, masked: string[], target: string[], maxLen = MAX_SEQ_LEN): number {
  if (masked.length !== target.length) {
    throw new Error(`masked/target line counts differ (${masked.length} != ${target.length})`);
  }
  let total = 0;
  for (let i = 0; i < masked.length; i++) {
    const pair = encodePair(model, masked[i], target[i], maxLen);
    total += model.loss(pair.input, pair.target);
  }
  return masked.length ? total / masked.length : 0;
}

/**
 * Reconstruction fine-tuning: train lines are re-masked dynamically each
 * epoch, validation uses the statically masked pairs on disk. The model is
 * left at its best-validation parameters.
 */
export function finetune(model: Denoiser, corpusDir: string, opts: FinetuneOptions): FinetuneResult {
  const corpus = loadSplitCorpus(corpusDir);
  const trainUnits = corpus.train.map(parseUnits);
  const rng = new Rng(opts.seed);

  const microBatch = Math.max(1, Math.floor(opts.batchSize / opts.accumSteps));
  const stepsPerEpoch = Math.max(1, Math.ceil(trainUnits.length / (microBatch * opts.accumSteps)));
  const totalSteps = stepsPerEpoch * opts.epochs;
  const opt = new AdamW(model, opts.lr, totalSteps, Math.floor(opts.warmupFraction * totalSteps));

  const stepLosses: number[] = [];
  const valLosses: number[] = [];
  let bestValLoss = Infinity;
  let bestSnap = model.snapshot();

  for (let epoch = 0; epoch < opts.epochs; epoch++) {
    const order = rng.shuffle([...trainUnits.keys()]);
    let cursor = 0;
    while (cursor < order.length) {
      const grads = model.newGrads();
      let lossSum = 0;
      let seen = 0;
      for (let a = 0; a < opts.accumSteps && cursor < order.length; a++) {
        const batch = order.slice(cursor, cursor + microBatch);
        cursor += microBatch;
        for (const idx of batch) {
          const units = trainUnits[idx];
          const plan = sampleMaskPlan(units, rng);
          const pair = encodePair(model, renderUnits(units, plan), renderUnits(units), opts.maxLen);
          lossSum += model.loss(pair.input, pair.target, grads);
          seen += 1;
        }
      }
      for (const g of grads) {
        for (let i = 0; i < g.length; i++) g[i] /= seen;
      }
      opt.update(grads);
      stepLosses.push(lossSum / seen);
    }
    const valLoss = evaluateVal(model, corpus.validMasked, corpus.validTarget, opts.maxLen);
    valLosses.push(valLoss);
    if (valLoss < bestValLoss) {
      bestValLoss = valLoss;
      bestSnap = model.snapshot();
    }
  }
  model.restore(bestSnap);
  return { stepLosses, valLosses, bestValLoss };
}

/**
 * Encode a full-order corpus file into REMB blocks: one mean-pooled vector
 * per line, grouped by table in first-appearance order, row order preserved.
 */
export function encodeCorpus(model: Denoiser, corpusPath: string, outPath: string, maxLen = MAX_SEQ_LEN): RembBlock[] {
  const lines = readLines(corpusPath);
  const order: string[] = [];
  const vectors = new Map<string, Float32Array[]>();
  for (const line of lines) {
    const table = tableOf(line);
    if (!vectors.has(table)) {
      vectors.set(table, []);
      order.push(table);
    }
    const { ids } = model.vocab.encode(line, maxLen);
    vectors.get(table)!.push(model.encode(ids));
  }
  const dim = model.dim;
  const blocks: RembBlock[] = order.map((table) => {
    const rows = vectors.get(table)!;
    const data = new Float32Array(rows.length * dim);
    rows.forEach((vec, r) => data.set(vec, r * dim));
    return { table, rows: rows.length, data };
  });
  writeRemb(outPath, dim, blocks);
  return blocks;
}

/** Resolve a checkpoint identifier: a JSON path, or "stock-<dim>" for a fresh seeded model. */
export function resolveCheckpoint(identifier: string, corpusLines: string[], seed: number): Denoiser {
  const stock = /^stock-(\d+)$/.exec(identifier);
  if (stock) {
    const vocab = Vocabulary.fromLines(corpusLines);
    return new Denoiser(vocab, parseInt(stock[1], 10), seed);
  }
  return Denoiser.load(identifier);
}

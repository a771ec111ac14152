/**
 * Tiny denoising text encoder.
 *
 * Per token: embedding lookup, one tanh hidden layer, softmax over the
 * vocabulary. Trained with cross-entropy against the unmasked target
 * sequence; rows are encoded by mean-pooling the hidden states over
 * non-padding positions, so the output dimension equals the hidden size.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { Rng } from "./rng.js";
import { PAD, Vocabulary } from "./tokenizer.js";

export interface TrainStep {
  loss: number;
}

function zeros(n: number): Float32Array {
  return new Float32Array(n);
}

function toBase64(arr: Float32Array): string {
  return Buffer.from(arr.buffer, arr.byteOffset, arr.byteLength).toString("base64");
}

function fromBase64(text: string): Float32Array {
  const buf = Buffer.from(text, "base64");
  return new Float32Array(buf.buffer, buf.byteOffset, buf.byteLength / 4).slice();
}

export class Denoiser {
  readonly vocab: Vocabulary;
  readonly dim: number;
  /** V x d token embeddings. */
  emb: Float32Array;
  /** d x d hidden projection, plus bias. */
  wh: Float32Array;
  bh: Float32Array;
  /** V x d output projection, plus bias. */
  wo: Float32Array;
  bo: Float32Array;

  constructor(vocab: Vocabulary, dim: number, seed = 0) {
    this.vocab = vocab;
    this.dim = dim;
    const v = vocab.size;
    const rng = new Rng(seed);
    const scale = 1 / Math.sqrt(dim);
    const init = (n: number) => {
      const arr = zeros(n);
      for (let i = 0; i < n; i++) arr[i] = rng.normal() * scale;
      return arr;
    };
    this.emb = init(v * dim);
    this.wh = init(dim * dim);
    this.bh = zeros(dim);
    this.wo = init(v * dim);
    this.bo = zeros(v);
  }

  private paramList(): Float32Array[] {
    return [this.emb, this.wh, this.bh, this.wo, this.bo];
  }

  /** Hidden states for a token-id sequence, one Float32Array(dim) per position. */
  hiddenStates(ids: number[]): Float32Array[] {
    const d = this.dim;
    return ids.map((id) => {
      const h = zeros(d);
      for (let i = 0; i < d; i++) {
        let pre = this.bh[i];
        for (let j = 0; j < d; j++) pre += this.wh[i * d + j] * this.emb[id * d + j];
        h[i] = Math.tanh(pre);
      }
      return h;
    });
  }

  /** Mean of hidden states over non-padding positions. */
  encode(ids: number[]): Float32Array {
    const padId = this.vocab.id(PAD);
    const kept = ids.filter((id) => id !== padId);
    const pooled = zeros(this.dim);
    if (kept.length === 0) return pooled;
    for (const h of this.hiddenStates(kept)) {
      for (let i = 0; i < this.dim; i++) pooled[i] += h[i];
    }
    for (let i = 0; i < this.dim; i++) pooled[i] /= kept.length;
    return pooled;
  }

  /**
   * Mean cross-entropy of reconstructing `target` from `input`, plus
   * gradients accumulated into `grads` (same layout as paramList) when given.
   * Sequences are aligned position-wise; a length mismatch is truncated to
   * the shorter one.
   */
  loss(input: number[], target: number[], grads?: Float32Array[]): number {
    const d = this.dim;
    const v = this.vocab.size;
    const n = Math.min(input.length, target.length);
    if (n === 0) return 0;
    let total = 0;
    for (let t = 0; t < n; t++) {
      const id = input[t];
      const e = this.emb.subarray(id * d, id * d + d);
      const pre = zeros(d);
      const h = zeros(d);
      for (let i = 0; i < d; i++) {
        let s = this.bh[i];
        for (let j = 0; j < d; j++) s += this.wh[i * d + j] * e[j];
        pre[i] = s;
        h[i] = Math.tanh(s);
      }
      const logits = zeros(v);
      let maxLogit = -Infinity;
      for (let k = 0; k < v; k++) {
        let s = this.bo[k];
        for (let j = 0; j < d; j++) s += this.wo[k * d + j] * h[j];
        logits[k] = s;
        if (s > maxLogit) maxLogit = s;
      }
      let z = 0;
      for (let k = 0; k < v; k++) z += Math.exp(logits[k] - maxLogit);
      const logZ = maxLogit + Math.log(z);
      total += logZ - logits[target[t]];

      if (grads) {
        const [gEmb, gWh, gBh, gWo, gBo] = grads;
        const dh = zeros(d);
        for (let k = 0; k < v; k++) {
          const p = Math.exp(logits[k] - logZ);
          const dl = (p - (k === target[t] ? 1 : 0)) / n;
          gBo[k] += dl;
          for (let j = 0; j < d; j++) {
            gWo[k * d + j] += dl * h[j];
            dh[j] += dl * this.wo[k * d + j];
          }
        }
        for (let i = 0; i < d; i++) {
          const dpre = dh[i] * (1 - h[i] * h[i]);
          gBh[i] += dpre;
          for (let j = 0; j < d; j++) {
            gWh[i * d + j] += dpre * e[j];
            gEmb[id * d + j] += dpre * this.wh[i * d + j];
          }
        }
      }
    }
    return total / n;
  }

  newGrads(): Float32Array[] {
    return this.paramList().map((p) => zeros(p.length));
  }

  save(path: string): void {
    const doc = {
      format: "embed-ckpt",
      version: 1,
      dim: this.dim,
      vocab: this.vocab.tokens,
      params: {
        emb: toBase64(this.emb),
        wh: toBase64(this.wh),
        bh: toBase64(this.bh),
        wo: toBase64(this.wo),
        bo: toBase64(this.bo),
      },
    };
    writeFileSync(path, JSON.stringify(doc));
  }

  static load(path: string): Denoiser {
    const doc = JSON.parse(readFileSync(path, "utf-8"));
    if (doc.format !== "embed-ckpt" || doc.version !== 1) {
      throw new Error(`${path}: not an embed-ckpt v1 checkpoint`);
    }
    const vocab = new Vocabulary(doc.vocab);
    const model = new Denoiser(vocab, doc.dim);
    model.emb = fromBase64(doc.params.emb);
    model.wh = fromBase64(doc.params.wh);
    model.bh = fromBase64(doc.params.bh);
    model.wo = fromBase64(doc.params.wo);
    model.bo = fromBase64(doc.params.bo);
    const v = vocab.size;
    if (model.emb.length !== v * doc.dim || model.wo.length !== v * doc.dim) {
      throw new Error(`${path}: parameter shapes inconsistent with vocab/dim`);
    }
    return model;
  }

  snapshot(): Float32Array[] {
    return this.paramList().map((p) => p.slice());
  }

  restore(snap: Float32Array[]): void {
    this.paramList().forEach((p, i) => p.set(snap[i]));
  }
}

/** Decoupled-weight-decay Adam with linear warmup into a cosine decay. */
export class AdamW {
  private m: Float32Array[];
  private v: Float32Array[];
  private step = 0;

  constructor(
    private readonly model: Denoiser,
    private readonly lr: number,
    private readonly totalSteps: number,
    private readonly warmupSteps = 0,
    private readonly weightDecay = 0.01,
    private readonly beta1 = 0.9,
    private readonly beta2 = 0.999,
    private readonly eps = 1e-8,
  ) {
    const params = [model.emb, model.wh, model.bh, model.wo, model.bo];
    this.m = params.map((p) => zeros(p.length));
    this.v = params.map((p) => zeros(p.length));
  }

  currentLr(): number {
    const t = this.step;
    if (this.warmupSteps > 0 && t < this.warmupSteps) {
      return (this.lr * (t + 1)) / this.warmupSteps;
    }
    const span = Math.max(this.totalSteps - this.warmupSteps, 1);
    const progress = Math.min((t - this.warmupSteps) / span, 1);
    return this.lr * 0.5 * (1 + Math.cos(Math.PI * progress));
  }

  update(grads: Float32Array[]): void {
    const lr = this.currentLr();
    this.step += 1;
    const params = [this.model.emb, this.model.wh, this.model.bh, this.model.wo, this.model.bo];
    const bc1 = 1 - this.beta1 ** this.step;
    const bc2 = 1 - this.beta2 ** this.step;
    params.forEach((p, pi) => {
      const g = grads[pi];
      const m = this.m[pi];
      const v = this.v[pi];
      for (let i = 0; i < p.length; i++) {
        m[i] = this.beta1 * m[i] + (1 - this.beta1) * g[i];
        v[i] = this.beta2 * v[i] + (1 - this.beta2) * g[i] * g[i];
        const mHat = m[i] / bc1;
        const vHat = v[i] / bc2;
        p[i] -= lr * (mHat / (Math.sqrt(vHat) + this.eps) + this.weightDecay * p[i]);
      }
    });
  }
}

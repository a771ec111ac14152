export { Rng } from "./rng.js";
export { Vocabulary, tokenize, SPECIAL_TOKENS, MASK_TOKEN, MAX_SEQ_LEN } from "./tokenizer.js";
export {
  parseUnits,
  renderUnits,
  sampleMaskPlan,
  maskableIndices,
  tableOf,
  readLines,
  loadSplitCorpus,
  MASK_PROBS,
} from "./corpus.js";
export { Denoiser, AdamW } from "./model.js";
export { writeRemb, readRemb } from "./remb.js";
export {
  encodeCorpus,
  finetune,
  evaluateVal,
  resolveCheckpoint,
  FINETUNE_DEFAULTS,
} from "./export.js";
export { main } from "./cli.js";

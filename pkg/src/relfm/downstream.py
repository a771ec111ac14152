"""Downstream binary entity classification on an unseen database.

Fresh typed projections and an MLP head are trained from scratch; the
transferred shared conv layers are either frozen or fine-tuned. Neighbor
sampling is time-bounded at each task row's seed timestamp by default so
future rows cannot leak into predictions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import hetgnn
from . import tensor as T
from .relmodel import parse_date_days

FROZEN = "frozen"
FINETUNE = "finetune"
NO_GNN = "none"

UNDEFINED = None  # sentinel for metrics that are undefined on the input


class TaskError(ValueError):
    pass


class MetricError(ValueError):
    pass


# -- metrics ---------------------------------------------------------------


def roc_auc(scored):
    """Probability a random positive outranks a random negative, ties half.

    `scored` is an iterable of (score, label) pairs. Computed via tied
    ranks (normalized Mann-Whitney U).
    """
    scores = np.array([s for s, _ in scored], dtype=np.float64)
    labels = np.array([l for _, l in scored], dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("undefined AUC: input contains a single class")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    r_pos = ranks[labels == 1].sum()
    u = r_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_accuracy_f1(scores, labels, threshold=0.5):
    """Thresholded metrics; precision is UNDEFINED with no predicted positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(scores) == 0:
        raise MetricError("empty input")
    preds = (scores >= threshold).astype(np.int64)
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    accuracy = float((preds == labels).mean())
    precision = UNDEFINED if tp + fp == 0 else tp / (tp + fp)
    f1 = UNDEFINED if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return precision, accuracy, f1


# -- task tables -----------------------------------------------------------


@dataclass(frozen=True)
class TaskRow:
    entity_id: str
    timestamp: int  # days since epoch
    label: int


@dataclass
class TaskTable:
    entity_table: str
    rows: list
    train_idx: np.ndarray = field(default=None)
    val_idx: np.ndarray = field(default=None)
    test_idx: np.ndarray = field(default=None)

    def subset(self, which):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[which]
        return [self.rows[i] for i in idx]


def load_task_table(path, entity_table, store):
    """Read `entity_id,timestamp,label` rows, resolving ids in the row store."""
    rows = []
    pk_index = store.table(entity_table).pk_index
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["entity_id", "timestamp", "label"]:
            raise TaskError(f"{path}: expected header entity_id,timestamp,label")
        for k, raw in enumerate(reader, start=2):
            if len(raw) != 3:
                raise TaskError(f"{path} row {k}: expected 3 fields")
            entity_id, ts_text, label_text = raw
            if entity_id not in pk_index:
                raise TaskError(f"{path} row {k}: unknown entity id {entity_id!r}")
            try:
                ts = parse_date_days(ts_text)
            except ValueError:
                raise TaskError(f"{path} row {k}: unparseable date {ts_text!r}") from None
            if label_text not in ("0", "1"):
                raise TaskError(f"{path} row {k}: label must be 0 or 1, got {label_text!r}")
            rows.append(TaskRow(entity_id=entity_id, timestamp=ts, label=int(label_text)))
    return TaskTable(entity_table=entity_table, rows=rows)


def load_task_manifest(path):
    doc = json.loads(open(path, encoding="utf-8").read())
    split = doc["time_split"]
    return (doc["entity_table"],
            parse_date_days(split["val_start"]),
            parse_date_days(split["test_start"]))


def assign_time_splits(task, val_start, test_start):
    """Temporal split: train < val_start <= val < test_start <= test."""
    ts = np.array([r.timestamp for r in task.rows])
    task.train_idx = np.flatnonzero(ts < val_start)
    task.val_idx = np.flatnonzero((ts >= val_start) & (ts < test_start))
    task.test_idx = np.flatnonzero(ts >= test_start)
    return task


def assign_random_splits(task, seed, fractions=(0.7, 0.15)):
    perm = np.random.default_rng(seed).permutation(len(task.rows))
    n_train = int(fractions[0] * len(perm))
    n_val = int(fractions[1] * len(perm))
    task.train_idx = np.sort(perm[:n_train])
    task.val_idx = np.sort(perm[n_train:n_train + n_val])
    task.test_idx = np.sort(perm[n_train + n_val:])
    return task


# -- model -----------------------------------------------------------------

DATE_DIM = 32
HEAD_HIDDEN = (128, 64)
HEAD_KEEP = 0.8


@dataclass
class DateEncoderParams:
    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor
    mean: float
    std: float


@dataclass
class HeadParams:
    layers: list  # [(W, b)] * 3


@dataclass
class DownstreamModel:
    gnn: object                    # HeteroSageParams or None in the no-GNN arm
    date: DateEncoderParams
    head: HeadParams
    mode: str                      # FROZEN | FINETUNE | NO_GNN
    fanout: tuple
    d_in: int
    d_h: int
    entity_table: str
    time_filter: bool = True
    dropout_keep: float = HEAD_KEEP

    @property
    def use_gnn(self):
        return self.mode != NO_GNN

    def trainable_parameters(self):
        out = []
        if self.use_gnn:
            for w, b in self.gnn.proj.values():
                out += [w, b]
            if self.mode == FINETUNE:
                out += self.gnn.shared_parameters()
        out += [self.date.w1, self.date.b1, self.date.w2, self.date.b2]
        for w, b in self.head.layers:
            out += [w, b]
        return out

    def named_parameters(self):
        out = {}
        if self.use_gnn:
            out.update(self.gnn.named_parameters())
        out.update({"date.W1": self.date.w1, "date.b1": self.date.b1,
                    "date.W2": self.date.w2, "date.b2": self.date.b2})
        for i, (w, b) in enumerate(self.head.layers, start=1):
            out[f"head{i}.W"] = w
            out[f"head{i}.b"] = b
        return out

    def snapshot(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def restore(self, snap):
        for k, v in self.named_parameters().items():
            v.data = snap[k].copy().astype(v.data.dtype)


@dataclass
class DownstreamConfig:
    lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    fanout: tuple = (20, 10)
    hidden_channels: int = 256
    layers: int = 2
    date_dim: int = DATE_DIM
    head_hidden: tuple = HEAD_HIDDEN
    dropout_keep: float = HEAD_KEEP
    time_filter: bool = True


def _init_linear(rng, d_in, d_out, dtype):
    bound = 1.0 / np.sqrt(d_in)
    w = T.Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)),
                 requires_grad=True, dtype=dtype)
    b = T.Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)
    return w, b


def init_model(graph, d_in, mode, cfg, pretrained=None, train_times=None,
               entity_table=None, dtype=np.float32):
    """Fresh typed projections, date encoder and head for a target schema.

    `pretrained` supplies the transferred shared conv stack (a dict of
    checkpoint arrays); without it conv layers are freshly initialized.
    `train_times` (seed timestamps of the training split, in days) fits
    the date normalization constants.
    """
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x0D)))
    gnn = None
    if mode != NO_GNN:
        gnn = hetgnn.init_params(graph.table_names, d_in, d_h=cfg.hidden_channels,
                                 layers=cfg.layers, seed=cfg.seed, dtype=dtype)
        if pretrained is not None:
            for i, conv in enumerate(gnn.convs, start=1):
                conv.w_self.data = pretrained[f"conv{i}.self.W"].astype(dtype)
                conv.w_neigh.data = pretrained[f"conv{i}.neigh.W"].astype(dtype)
                conv.bias.data = pretrained[f"conv{i}.b"].astype(dtype)
        if mode == FROZEN:
            for p in gnn.shared_parameters():
                p.requires_grad = False

    times = np.asarray(train_times if train_times is not None else [0.0], dtype=np.float64)
    std = float(times.std())
    if len(times) > 1 and std == 0.0:
        raise TaskError("degenerate time range: all training seed times equal")
    w1, b1 = _init_linear(rng, 1, cfg.date_dim, dtype)
    w2, b2 = _init_linear(rng, cfg.date_dim, cfg.date_dim, dtype)
    date = DateEncoderParams(w1=w1, b1=b1, w2=w2, b2=b2,
                             mean=float(times.mean()), std=std if std > 0 else 1.0)

    head_in = (cfg.hidden_channels if mode != NO_GNN else d_in) + cfg.date_dim
    dims = (head_in,) + tuple(cfg.head_hidden) + (2,)
    head = HeadParams(layers=[_init_linear(rng, dims[i], dims[i + 1], dtype)
                              for i in range(len(dims) - 1)])
    return DownstreamModel(
        gnn=gnn, date=date, head=head, mode=mode, fanout=tuple(cfg.fanout),
        d_in=d_in, d_h=cfg.hidden_channels, entity_table=entity_table,
        time_filter=cfg.time_filter, dropout_keep=cfg.dropout_keep)


def encode_dates(model, timestamps):
    """Standardized scalar through the two-layer ReLU date encoder."""
    z = (np.asarray(timestamps, dtype=np.float64) - model.date.mean) / model.date.std
    x = T.Tensor(z.reshape(-1, 1).astype(model.date.w1.data.dtype))
    h = T.relu(T.linear(x, model.date.w1, model.date.b1))
    return T.linear(h, model.date.w2, model.date.b2)


def _entity_ordinals(model, graph, store, batch):
    pk_index = store.table(model.entity_table).pk_index
    return [graph.global_ordinal(model.entity_table, pk_index[r.entity_id])
            for r in batch]


def forward_task(model, graph, store, feats, batch, training, rng):
    """Logits for a batch of task rows.

    Rows sharing the GNN path get per-row time-bounded subgraphs, merged
    into one disjoint batch graph so the whole batch is a single forward.
    """
    ordinals = _entity_ordinals(model, graph, store, batch)
    if model.use_gnn:
        subs = []
        for r, o in zip(batch, ordinals):
            bound = r.timestamp if model.time_filter else None
            subs.append(hetgnn.sample_neighborhood(
                graph, [o], model.fanout, rng, time_bound=bound))
        merged = _merge_subgraphs(subs)
        ent = hetgnn.forward(model.gnn, merged, feats,
                             table_offsets=graph.block_offsets)
    else:
        x = np.stack([_raw_feature(graph, feats, o) for o in ordinals])
        ent = T.Tensor(x)
    dates = encode_dates(model, [r.timestamp for r in batch])
    h = T.concat([ent, dates], axis=1)
    for i, (w, b) in enumerate(model.head.layers):
        h = T.linear(h, w, b)
        if i < len(model.head.layers) - 1:
            h = T.relu(h)
            h = T.dropout(h, model.dropout_keep, rng, training)
    return h


def _raw_feature(graph, feats, ordinal):
    table, local = graph.local_ordinal(ordinal)
    return feats.blocks[table][local]


def _merge_subgraphs(subs):
    """Disjoint union of per-row subgraphs into one SampledSubgraph."""
    global_ids, tables, seed_locals, edges = [], [], [], []
    offset = 0
    for sub in subs:
        global_ids.append(sub.global_ids)
        tables += sub.node_tables
        seed_locals.append(sub.seed_locals + offset)
        if len(sub.edges):
            edges.append(sub.edges + offset)
        offset += sub.n_nodes
    return hetgnn.SampledSubgraph(
        global_ids=np.concatenate(global_ids),
        node_tables=tables,
        seed_locals=np.concatenate(seed_locals),
        edges=np.concatenate(edges) if edges else np.empty((0, 2), dtype=np.int64),
        hop_sample_counts=[c for sub in subs for c in sub.hop_sample_counts])


def score_rows(model, graph, store, feats, rows, rng=None, batch_size=256):
    """Positive-class probabilities in eval mode (deterministic under rng seed)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    scores = []
    for i in range(0, len(rows), batch_size):
        batch = rows[i:i + batch_size]
        logits = forward_task(model, graph, store, feats, batch, training=False, rng=rng)
        scores.append(T.softmax_probs(logits)[:, 1])
    return np.concatenate(scores) if scores else np.zeros(0)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_auc: float


def train_downstream(pretrained, graph, store, feats, task, mode, cfg,
                     dtype=np.float32):
    """Mini-batch cross-entropy training with best-validation-AUC selection.

    In frozen mode the shared conv parameters receive no updates; the
    returned model carries the epoch checkpoint with the best validation
    ROC-AUC (final epoch if validation AUC is never defined).
    """
    train_rows = task.subset("train")
    val_rows = task.subset("val")
    if not train_rows:
        raise TaskError("empty training split")
    model = init_model(graph, feats.dim, mode, cfg, pretrained=pretrained,
                       train_times=[r.timestamp for r in train_rows],
                       entity_table=task.entity_table, dtype=dtype)
    opt = T.Adam(model.trainable_parameters(), lr=cfg.lr)
    history = []
    best = (-np.inf, model.snapshot())
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch, 0x7A)))
        order = rng.permutation(len(train_rows))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_rows[j] for j in order[i:i + cfg.batch_size]]
            opt.zero_grad()
            logits = forward_task(model, graph, store, feats, batch,
                                  training=True, rng=rng)
            loss = T.softmax_cross_entropy(logits, [r.label for r in batch])
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        val_auc = np.nan
        if val_rows:
            eval_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xE0)))
            scores = score_rows(model, graph, store, feats, val_rows, rng=eval_rng)
            labels = [r.label for r in val_rows]
            try:
                val_auc = roc_auc(list(zip(scores, labels)))
            except MetricError:
                pass
        history.append(EpochMetrics(epoch, float(np.mean(losses)), float(val_auc)))
        if not np.isnan(val_auc) and val_auc > best[0]:
            best = (val_auc, model.snapshot())
        elif np.isinf(best[0]) and epoch == cfg.epochs:
            best = (best[0], model.snapshot())
    model.restore(best[1])
    return model, history


def evaluate_split(model, graph, store, feats, task, which, seed=0):
    """Metrics for one split: (roc_auc, precision, accuracy, f1)."""
    rows = task.subset(which)
    if not rows:
        raise TaskError(f"empty split {which!r}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE0)))
    scores = score_rows(model, graph, store, feats, rows, rng=rng)
    labels = np.array([r.label for r in rows])
    try:
        auc = roc_auc(list(zip(scores, labels)))
    except MetricError:
        auc = UNDEFINED
    precision, accuracy, f1 = precision_accuracy_f1(scores, labels)
    return auc, precision, accuracy, f1


# -- ablation --------------------------------------------------------------

ABLATION_CONFIGS = [
    ("informative+none", "informative", NO_GNN),
    ("informative+frozen", "informative", FROZEN),
    ("informative+finetuned", "informative", FINETUNE),
    ("random+none", "random", NO_GNN),
    ("random+frozen", "random", FROZEN),
    ("random+finetuned", "random", FINETUNE),
]


def run_ablation(graph, store, feats_by_source, task, cfg, pretrained,
                 splits=("test",)):
    """The six {embedding source} x {GNN usage} configurations, shared seeds.

    Returns rows of (config, split, roc_auc, precision, accuracy, f1).
    """
    out = []
    for name, source, mode in ABLATION_CONFIGS:
        feats = feats_by_source[source]
        model, _ = train_downstream(
            pretrained if mode != NO_GNN else None,
            graph, store, feats, task, mode, cfg)
        for which in splits:
            auc, precision, accuracy, f1 = evaluate_split(
                model, graph, store, feats, task, which, seed=cfg.seed)
            out.append((name, which, auc, precision, accuracy, f1))
    return out


def _fmt(value):
    return "undefined" if value is UNDEFINED else f"{value:.6f}"


def write_metrics_csv(rows, path):
    """CSV `config,split,roc_auc,precision,accuracy,f1`."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["config", "split", "roc_auc", "precision", "accuracy", "f1"])
        for config, split, auc, precision, accuracy, f1 in rows:
            w.writerow([config, split, _fmt(auc), _fmt(precision),
                        _fmt(accuracy), _fmt(f1)])

"""Masked-feature-reconstruction pretraining over one or more databases.

Random input dimensions of each seed node are zeroed before message
passing; the loss (a weighted blend of scaled cosine error and MSE) is
computed only on those dimensions, so the model must recover them from
neighbors. Batches round-robin across source databases.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import hetgnn
from . import tensor as T


class LossError(ValueError):
    pass


@dataclass
class PretrainConfig:
    mask_prob: float = 0.15
    alpha: float = 0.7
    gamma: float = 2.0
    epsilon: float = 1e-6
    fanout: tuple = (20, 10)
    batch_size: int = 16384
    lr: float = 1e-4
    epochs: int = 20
    seed: int = 0
    hidden_channels: int = 256
    layers: int = 2

    def __post_init__(self):
        if not (0.0 < self.mask_prob <= 1.0):
            raise ValueError(f"mask_prob must be in (0, 1], got {self.mask_prob}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.gamma < 1.0:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def from_json(cls, path):
        doc = json.loads(open(path, encoding="utf-8").read())
        known = {k: doc[k] for k in (
            "mask_prob", "alpha", "gamma", "epsilon", "fanout", "batch_size",
            "lr", "epochs", "seed", "hidden_channels", "layers") if k in doc}
        if "fanout" in known:
            known["fanout"] = tuple(known["fanout"])
        return cls(**known)


def sample_dim_mask(d, p, rng):
    """Boolean mask over feature dims, each set with probability p.

    At least one dim is always masked (uniform fallback) so every seed
    row contributes to the loss.
    """
    mask = rng.random(d) < p
    if not mask.any():
        mask[int(rng.integers(d))] = True
    return mask


def mask_features(x, p, rng):
    """Zero each feature dimension independently with probability p.

    Returns (masked copy, boolean mask). Rows with an all-false mask are
    later excluded from the loss set.
    """
    if not (0.0 < p <= 1.0):
        raise ValueError(f"mask probability must be in (0, 1], got {p}")
    mask = rng.random(x.shape) < p
    masked = x.copy()
    masked[mask] = 0.0
    return masked, mask


def _select_masked_rows(mask):
    keep = np.flatnonzero(mask.any(axis=1))
    if len(keep) == 0:
        raise LossError("no masked dimensions in any node")
    return keep


def scaled_cosine_loss(x_hat, x, mask, gamma=2.0, eps=1e-6):
    """Mean over nodes of (1 - cos(x_hat, x on masked dims))**gamma."""
    keep = _select_masked_rows(mask)
    m = mask[keep].astype(x_hat.data.dtype)
    xt = np.asarray(x)[keep] * m
    xh = T.mul(T.gather_rows(x_hat, keep), T.Tensor(m))
    dot = T.row_sum(T.mul(xh, T.Tensor(xt)))
    norm_h = T.sqrt(T.row_sum(T.power(xh, 2)))
    norm_t = np.sqrt((xt * xt).sum(axis=1))
    denom = T.add(T.mul(norm_h, T.Tensor(norm_t)), float(eps))
    cos = T.div(dot, denom)
    one = T.Tensor(np.ones_like(cos.data))
    return T.mean_all(T.power(T.sub(one, cos), gamma))


def masked_mse_loss(x_hat, x, mask):
    """Mean over nodes of the squared error norm on masked dims."""
    keep = _select_masked_rows(mask)
    m = mask[keep].astype(x_hat.data.dtype)
    diff = T.mul(T.sub(T.gather_rows(x_hat, keep), T.Tensor(np.asarray(x)[keep])),
                 T.Tensor(m))
    return T.mean_all(T.row_sum(T.power(diff, 2)))


def combined_loss(x_hat, x, mask, cfg):
    """alpha * cosine term + (1 - alpha) * MSE term; returns all three."""
    l_cos = scaled_cosine_loss(x_hat, x, mask, gamma=cfg.gamma, eps=cfg.epsilon)
    l_mse = masked_mse_loss(x_hat, x, mask)
    total = T.add(T.mul(l_cos, cfg.alpha), T.mul(l_mse, 1.0 - cfg.alpha))
    return total, l_cos, l_mse


def masked_mse_per_dim(x_hat, x, mask):
    """Per-dimension masked MSE (SSE / |masked dims|, averaged over nodes).

    Plain-numpy reporting metric; comparable across masking probabilities.
    """
    x_hat = np.asarray(x_hat)
    x = np.asarray(x)
    keep = mask.any(axis=1)
    if not keep.any():
        raise LossError("no masked dimensions in any node")
    sse = (((x_hat - x) * mask) ** 2).sum(axis=1)[keep]
    counts = mask.sum(axis=1)[keep]
    return float((sse / counts).mean())


@dataclass
class PretrainDatabase:
    """One pretraining source: its graph, raw features, and a seed split."""

    graph: object
    feats: object
    train_seeds: np.ndarray = field(default=None)
    val_seeds: np.ndarray = field(default=None)
    val_masks: np.ndarray = field(default=None)


@dataclass
class HistoryRow:
    epoch: int
    split: str
    loss_combined: float
    loss_cos: float
    loss_mse: float


def write_history_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "split", "loss_combined", "loss_cos", "loss_mse"])
        for r in rows:
            w.writerow([r.epoch, r.split,
                        f"{r.loss_combined:.8g}", f"{r.loss_cos:.8g}", f"{r.loss_mse:.8g}"])


def _batches(ids, batch_size):
    return [ids[i:i + batch_size] for i in range(0, len(ids), batch_size)]


def build_schedule(per_db_batches):
    """Round-robin (db index, batch) order until every source is exhausted."""
    schedule = []
    cursors = [0] * len(per_db_batches)
    remaining = sum(len(b) for b in per_db_batches)
    while remaining:
        for di, batches in enumerate(per_db_batches):
            if cursors[di] < len(batches):
                schedule.append((di, batches[cursors[di]]))
                cursors[di] += 1
                remaining -= 1
    return schedule


def _batch_loss(params, db, seeds, masks_by_seed, cfg, rng, dtype):
    """Forward + reconstruction loss for one batch of seed nodes."""
    sub = hetgnn.sample_neighborhood(db.graph, seeds, cfg.fanout, rng)
    x_local = hetgnn.gather_features(sub, db.feats, db.graph.block_offsets).astype(dtype)
    seed_x = x_local[sub.seed_locals].copy()
    mask = np.stack([masks_by_seed[int(s)] for s in seeds])
    masked = seed_x.copy()
    masked[mask] = 0.0
    x_local[sub.seed_locals] = masked
    h = hetgnn.forward(params, sub, db.feats, x_local=x_local)
    x_hat = hetgnn.decode_reconstruction(params, h)
    total, l_cos, l_mse = combined_loss(x_hat, seed_x, mask, cfg)
    per_dim = masked_mse_per_dim(x_hat.data, seed_x, mask)
    return total, float(l_cos.data), float(l_mse.data), per_dim


def run_pretraining(databases, cfg, params=None, checkpoint_dir=None, dtype=np.float32):
    """Train the shared conv stack over all source databases.

    `databases` is a list of (EntityGraph, EmbeddingMatrix) pairs; typed
    projections are created per database table (tables from different
    databases are distinct node types), while conv layers and the decoder
    are shared. Returns (params list per db, history rows).
    """
    if not databases:
        raise ValueError("at least one database required")
    dims = {feats.dim for _, feats in databases}
    if len(dims) != 1:
        raise ValueError(f"feature dims differ across databases: {sorted(dims)}")
    d_in = dims.pop()

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD0)))
    dbs = []
    per_db_params = []
    shared = None
    for di, (graph, feats) in enumerate(databases):
        p = hetgnn.init_params(
            graph.table_names, d_in, d_h=cfg.hidden_channels, layers=cfg.layers,
            seed=cfg.seed + di, dtype=dtype)
        if params is not None and di == 0 and params.convs:
            p.convs, p.decoder = params.convs, params.decoder
        if shared is None:
            shared = (p.convs, p.decoder)
        else:
            p.convs, p.decoder = shared
        per_db_params.append(p)

        seeds = np.arange(graph.n_nodes)
        perm = rng.permutation(graph.n_nodes)
        n_val = graph.n_nodes // 10
        db = PretrainDatabase(graph=graph, feats=feats,
                              train_seeds=seeds[perm[n_val:]],
                              val_seeds=seeds[perm[:n_val]])
        # static validation masks, one row per val seed
        mask_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, di, 0xA1)))
        db.val_masks = {int(s): sample_dim_mask(d_in, cfg.mask_prob, mask_rng)
                        for s in db.val_seeds}
        dbs.append(db)

    opt_params = []
    for p in per_db_params:
        opt_params += p.parameters()
    opt = T.Adam(opt_params, lr=cfg.lr)

    history = []
    for epoch in range(1, cfg.epochs + 1):
        ep_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch)))
        per_db_batches = []
        train_masks = []
        for di, db in enumerate(dbs):
            order = db.train_seeds[ep_rng.permutation(len(db.train_seeds))]
            per_db_batches.append(_batches(order, cfg.batch_size))
            # dynamic per-epoch masks for training seeds
            masks = {int(s): sample_dim_mask(d_in, cfg.mask_prob, ep_rng)
                     for s in db.train_seeds}
            train_masks.append(masks)
        sums = np.zeros(3)
        n_batches = 0
        for di, batch in build_schedule(per_db_batches):
            opt.zero_grad()
            total, l_cos, l_mse, _ = _batch_loss(
                per_db_params[di], dbs[di], batch, train_masks[di], cfg, ep_rng, dtype)
            total.backward()
            opt.step()
            sums += (float(total.data), l_cos, l_mse)
            n_batches += 1
        history.append(HistoryRow(epoch, "train", *(sums / max(n_batches, 1))))

        # validation with static masks and a fixed sampling stream
        val_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xEE)))
        sums = np.zeros(3)
        n_batches = 0
        for di, db in enumerate(dbs):
            if len(db.val_seeds) == 0:
                continue
            for batch in _batches(db.val_seeds, cfg.batch_size):
                total, l_cos, l_mse, _ = _batch_loss(
                    per_db_params[di], db, batch, db.val_masks, cfg, val_rng, dtype)
                sums += (float(total.data), l_cos, l_mse)
                n_batches += 1
        if n_batches:
            history.append(HistoryRow(epoch, "validation", *(sums / n_batches)))

        if checkpoint_dir is not None:
            shared_entries = {}
            for name, t in per_db_params[0].named_parameters().items():
                if name.startswith(("conv", "decoder")):
                    shared_entries[name] = t.data
            T.save_checkpoint(shared_entries, f"{checkpoint_dir}/epoch{epoch:03d}.rfmp")

    return per_db_params, history


def evaluate_heldout_mse(params, db, cfg, seeds=None, masks=None):
    """Held-out per-dimension masked MSE under static masks."""
    seeds = db.val_seeds if seeds is None else seeds
    masks = db.val_masks if masks is None else masks
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xEF)))
    totals = []
    for batch in _batches(seeds, cfg.batch_size):
        _, _, _, per_dim = _batch_loss(params, db, batch, masks, cfg, rng, np.float32)
        totals.append(per_dim)
    return float(np.mean(totals))


def shared_checkpoint_entries(params):
    """Conv + decoder arrays, the transferable part of a pretrained model."""
    return {name: t.data.copy() for name, t in params.named_parameters().items()
            if name.startswith(("conv", "decoder"))}

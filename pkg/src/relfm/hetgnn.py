"""Heterogeneous GraphSAGE: typed projections, shared mean-aggregation conv
layers across all edge types, a reconstruction decoder, and the
fanout-bounded neighbor sampler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import EmbeddingMatrix

DEFAULT_FANOUT = (20, 10)
DEFAULT_HIDDEN = 256
DEFAULT_LAYERS = 2


@dataclass
class ConvLayer:
    w_self: T.Tensor
    w_neigh: T.Tensor
    bias: T.Tensor


@dataclass
class HeteroSageParams:
    """Typed input projections plus type-agnostic shared conv stack."""

    proj: dict            # table name -> (W, b)
    convs: list           # ConvLayer, shared across all node/edge types
    decoder: tuple        # (W, b) mapping hidden dim back to input dim
    d_in: int
    d_h: int

    def named_parameters(self):
        out = {}
        for table, (w, b) in self.proj.items():
            out[f"proj.{table}.W"] = w
            out[f"proj.{table}.b"] = b
        for i, conv in enumerate(self.convs, start=1):
            out[f"conv{i}.self.W"] = conv.w_self
            out[f"conv{i}.neigh.W"] = conv.w_neigh
            out[f"conv{i}.b"] = conv.bias
        out["decoder.W"] = self.decoder[0]
        out["decoder.b"] = self.decoder[1]
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def shared_parameters(self):
        """Conv-stack parameters transferred between pretraining and tasks."""
        out = []
        for conv in self.convs:
            out += [conv.w_self, conv.w_neigh, conv.bias]
        return out

    def save(self, path):
        T.save_checkpoint({k: v.data for k, v in self.named_parameters().items()}, path)

    def snapshot(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def restore(self, snap):
        for k, v in self.named_parameters().items():
            v.data = snap[k].copy().astype(v.data.dtype)


def _init_linear(rng, d_in, d_out, dtype):
    bound = 1.0 / np.sqrt(d_in)
    w = T.Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)),
                 requires_grad=True, dtype=dtype)
    b = T.Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)
    return w, b


def init_params(table_names, d_in, d_h=DEFAULT_HIDDEN, layers=DEFAULT_LAYERS,
                seed=0, dtype=np.float32):
    """Uniform(-1/sqrt(fan_in), +) weights, zero biases, deterministic in seed."""
    if d_in <= 0 or d_h <= 0 or layers <= 0:
        raise ValueError("dimensions and layer count must be positive")
    rng = np.random.default_rng(seed)
    proj = {t: _init_linear(rng, d_in, d_h, dtype) for t in table_names}
    convs = []
    for _ in range(layers):
        w_self, bias = _init_linear(rng, d_h, d_h, dtype)
        w_neigh, _ = _init_linear(rng, d_h, d_h, dtype)
        convs.append(ConvLayer(w_self=w_self, w_neigh=w_neigh, bias=bias))
    decoder = _init_linear(rng, d_h, d_in, dtype)
    return HeteroSageParams(proj=proj, convs=convs, decoder=decoder, d_in=d_in, d_h=d_h)


def load_params(path, d_in, d_h, dtype=np.float32):
    entries = T.load_checkpoint(path)
    proj = {}
    convs = {}
    for name, arr in entries.items():
        t = T.Tensor(arr, requires_grad=True, dtype=dtype)
        parts = name.split(".")
        if parts[0] == "proj":
            proj.setdefault(parts[1], {})[parts[2]] = t
        elif parts[0].startswith("conv"):
            convs.setdefault(int(parts[0][4:]), {})[".".join(parts[1:])] = t
        elif parts[0] == "decoder":
            convs.setdefault("decoder", {})[parts[1]] = t
    dec = convs.pop("decoder")
    layers = [ConvLayer(w_self=convs[i]["self.W"], w_neigh=convs[i]["neigh.W"],
                        bias=convs[i]["b"]) for i in sorted(k for k in convs)]
    return HeteroSageParams(
        proj={t: (d["W"], d["b"]) for t, d in proj.items()},
        convs=layers, decoder=(dec["W"], dec["b"]), d_in=d_in, d_h=d_h)


@dataclass
class SampledSubgraph:
    """Layered neighborhood sample around a batch of seed nodes."""

    global_ids: np.ndarray        # local index -> global ordinal
    node_tables: list             # local index -> table name
    seed_locals: np.ndarray
    edges: np.ndarray             # (src_local, dst_local), deduplicated
    hop_sample_counts: list = field(default_factory=list)
    # per hop: list of sampled-neighbor counts, one per frontier node

    @property
    def n_nodes(self):
        return len(self.global_ids)


def sample_neighborhood(g, seeds, fanout, rng, time_bound=None):
    """Sample incoming neighbors hop by hop, pooled across all relations.

    Per frontier node at hop k, distinct in-neighbors are drawn without
    replacement up to fanout[k]; nodes with timestamp > time_bound are
    excluded before sampling.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    local_of = {}
    global_ids = []
    tables = []

    def intern(ordinal):
        loc = local_of.get(ordinal)
        if loc is None:
            loc = local_of[ordinal] = len(global_ids)
            global_ids.append(ordinal)
            tables.append(g.node_table(ordinal))
        return loc

    seed_locals = np.array([intern(int(s)) for s in seeds], dtype=np.int64)
    edges = set()
    hop_counts = []
    frontier = [int(s) for s in seeds]
    for cap in fanout:
        next_frontier = []
        next_seen = set()
        counts = []
        for v in frontier:
            nbrs = np.unique(g.in_neighbors(v))
            if time_bound is not None and len(nbrs):
                nbrs = nbrs[g.timestamps[nbrs] <= time_bound]
            if len(nbrs) > cap:
                nbrs = nbrs[rng.choice(len(nbrs), size=cap, replace=False)]
            counts.append(len(nbrs))
            v_loc = local_of[v]
            for u in sorted(int(x) for x in nbrs):
                u_loc = intern(u)
                edges.add((u_loc, v_loc))
                if u not in next_seen:
                    next_seen.add(u)
                    next_frontier.append(u)
        hop_counts.append(counts)
        frontier = next_frontier
    edge_arr = (np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
                if edges else np.empty((0, 2), dtype=np.int64))
    return SampledSubgraph(
        global_ids=np.array(global_ids, dtype=np.int64),
        node_tables=tables, seed_locals=seed_locals,
        edges=edge_arr, hop_sample_counts=hop_counts)


def gather_features(sub, feats, table_offsets):
    """Raw feature matrix for the subgraph's nodes, local order."""
    out = np.empty((sub.n_nodes, feats.dim), dtype=np.float32)
    for i, (gid, table) in enumerate(zip(sub.global_ids, sub.node_tables)):
        start = table_offsets[table][0]
        out[i] = feats.blocks[table][gid - start]
    return out


def _neighbor_segments(sub):
    """Flat index + offsets for the self-inclusive neighbor mean of each node."""
    lists = [[i] for i in range(sub.n_nodes)]  # self-loop: node joins its own mean
    for u, v in sub.edges:
        lists[v].append(int(u))
    flat = np.fromiter((x for lst in lists for x in lst), dtype=np.int64)
    offsets = np.zeros(sub.n_nodes + 1, dtype=np.int64)
    np.cumsum([len(lst) for lst in lists], out=offsets[1:])
    return flat, offsets


def forward(params, sub, feats, table_offsets=None, x_local=None):
    """Seed embeddings in the hidden space after the shared conv stack.

    Features come either from an EmbeddingMatrix (with the graph's block
    offsets) or from a precomputed local feature array `x_local`, which
    lets callers mask seed inputs before propagation. The last conv layer
    is linear so downstream reconstructions can be negative.
    """
    if x_local is None:
        if not isinstance(feats, EmbeddingMatrix):
            raise TypeError("feats must be an EmbeddingMatrix when x_local is absent")
        x_local = gather_features(sub, feats, table_offsets)
    x = x_local if isinstance(x_local, T.Tensor) else T.Tensor(x_local)

    # typed projections, scattered back into local node order
    parts = []
    by_table = {}
    for i, table in enumerate(sub.node_tables):
        by_table.setdefault(table, []).append(i)
    for table, idx in by_table.items():
        if table not in params.proj:
            raise KeyError(f"no typed projection for table {table!r}")
        w, b = params.proj[table]
        parts.append((T.linear(T.gather_rows(x, idx), w, b), idx))
    h = T.assemble_rows(parts, sub.n_nodes)

    flat, offsets = _neighbor_segments(sub)
    for li, conv in enumerate(params.convs):
        neigh = T.segment_mean(h, flat, offsets)
        h = T.add(T.add(T.matmul(h, conv.w_self), T.matmul(neigh, conv.w_neigh)),
                  conv.bias)
        if li < len(params.convs) - 1:
            h = T.relu(h)
    return T.gather_rows(h, sub.seed_locals)


def decode_reconstruction(params, h):
    """Shared linear map from the hidden space back to the input feature dim."""
    w, b = params.decoder
    return T.linear(h, w, b)

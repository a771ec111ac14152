"""Minimal dense-tensor engine with reverse-mode autodiff and Adam.

Implements exactly the operation set the graph models need: linear layers,
relu, dropout, row reductions, gather/scatter, segment means and
softmax cross-entropy. Buffers are numpy arrays; float32 by default with
a float64 mode used for gradient checking.
"""

from __future__ import annotations

import struct

import numpy as np


class TensorError(ValueError):
    pass


class Tensor:
    """Dense array node in a dynamically built computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if g.shape != self.data.shape:
            raise TensorError(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from a scalar loss."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise TensorError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_ran:
            raise TensorError("backward already ran on this tensor; rebuild the graph")
        self._backward_ran = True
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _const(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise / arithmetic ---------------------------------------------


def add(a, b):
    b = _const(b, a)
    if a.shape != b.shape and not (a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]) \
            and b.data.ndim != 0 and a.data.ndim != 0:
        raise TensorError(f"add shape mismatch: {a.shape} vs {b.shape}")
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    b = _const(b, a)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    b = _const(b, a)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    b = _const(b, a)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    # bias-over-rows case: (n, d) grad reduced to (d,)
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    raise TensorError(f"cannot reduce gradient {g.shape} to {shape}")


def power(a, exponent):
    """Elementwise a**exponent for a constant exponent."""
    data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(data, (a,), backward)


def sqrt(a):
    """Elementwise square root; subgradient 0 at 0 to keep gradients finite."""
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            denom = 2.0 * data
            grad = np.where(denom > 0, g / np.where(denom > 0, denom, 1.0), 0.0)
            a._accumulate(grad.astype(a.data.dtype))

    return _make(data, (a,), backward)


# -- matrix ops ------------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def linear(x, w, bias):
    """y = x @ w + bias, bias broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise TensorError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    if bias.data.ndim != 1 or bias.shape[0] != w.shape[1]:
        raise TensorError(f"linear bias shape {bias.shape} != ({w.shape[1]},)")
    return add(matmul(x, w), bias)


# -- nonlinearities --------------------------------------------------------


def relu(a):
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            # gradient at exactly 0 is 0
            a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward)


def dropout(a, keep_prob, rng, training):
    """Inverted dropout: surviving activations scaled by 1/keep_prob."""
    if not (0.0 < keep_prob <= 1.0):
        raise TensorError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return a
    mask = (rng.random(a.shape) < keep_prob).astype(a.data.dtype) / keep_prob
    data = a.data * mask

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(data, (a,), backward)


# -- reductions / reshaping -----------------------------------------------


def sum_all(a):
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full(a.shape, g, dtype=a.data.dtype))

    return _make(data, (a,), backward)


def row_sum(a):
    """Sum over columns of a 2-D tensor, yielding one value per row."""
    if a.data.ndim != 2:
        raise TensorError("row_sum expects a 2-D tensor")
    data = a.data.sum(axis=1)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.repeat(g[:, None], a.shape[1], axis=1))

    return _make(data, (a,), backward)


def mean_rows(a):
    """Average a non-empty set of row vectors into one vector."""
    if a.data.ndim != 2:
        raise TensorError("mean_rows expects a 2-D tensor")
    n = a.shape[0]
    if n == 0:
        raise TensorError("mean_rows of an empty row set")
    data = a.data.mean(axis=0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.repeat(g[None, :], n, axis=0) / n)

    return _make(data, (a,), backward)


def mean_all(a):
    n = a.data.size
    if n == 0:
        raise TensorError("mean of an empty tensor")
    data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full(a.shape, g / n, dtype=a.data.dtype))

    return _make(data, (a,), backward)


def concat(parts, axis=1):
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p._accumulate(piece)

    return _make(data, tuple(parts), backward)


def gather_rows(a, index):
    """Select rows of a 2-D tensor; gradient scatters back with accumulation."""
    index = np.asarray(index, dtype=np.int64)
    data = a.data[index]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, index, g)
            a._accumulate(acc)

    return _make(data, (a,), backward)


def assemble_rows(parts, n_rows):
    """Build an (n_rows, d) tensor from (piece, row_positions) pairs.

    Positions across pieces must be disjoint and cover [0, n_rows).
    """
    parts = [(p, np.asarray(idx, dtype=np.int64)) for p, idx in parts]
    d = parts[0][0].shape[1]
    data = np.empty((n_rows, d), dtype=parts[0][0].data.dtype)
    covered = 0
    for p, idx in parts:
        data[idx] = p.data
        covered += len(idx)
    if covered != n_rows:
        raise TensorError(f"assemble_rows covers {covered} of {n_rows} rows")

    def backward(g):
        for p, idx in parts:
            if p.requires_grad:
                p._accumulate(g[idx])

    return _make(data, tuple(p for p, _ in parts), backward)


def segment_mean(a, flat_index, offsets):
    """Per-segment mean of gathered rows.

    Segment i averages rows a[flat_index[offsets[i]:offsets[i+1]]]; every
    segment must be non-empty.
    """
    flat_index = np.asarray(flat_index, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    if np.any(counts <= 0):
        raise TensorError("segment_mean requires non-empty segments")
    n_seg = len(counts)
    seg_ids = np.repeat(np.arange(n_seg), counts)
    sums = np.zeros((n_seg, a.shape[1]), dtype=a.data.dtype)
    np.add.at(sums, seg_ids, a.data[flat_index])
    data = sums / counts[:, None]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, flat_index, g[seg_ids] / counts[seg_ids][:, None])
            a._accumulate(acc)

    return _make(data, (a,), backward)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(target logit)."""
    if logits.data.ndim != 2:
        raise TensorError("softmax_cross_entropy expects 2-D logits")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise TensorError(f"labels shape {labels.shape} != ({logits.shape[0]},)")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -np.log(np.maximum(probs[np.arange(n), labels], np.finfo(probs.dtype).tiny))
    data = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def backward(g):
        if logits.requires_grad:
            grad = probs.copy()
            grad[np.arange(n), labels] -= 1.0
            logits._accumulate(grad * (g / n))

    return _make(data, (logits,), backward)


def softmax_probs(logits):
    """Row-wise softmax as plain numpy (no gradient), for scoring."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


# -- optimizer -------------------------------------------------------------


class Adam:
    """Adam with bias correction over a deduplicated parameter list."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        unique = []
        seen = set()
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                unique.append(p)
        self.params = unique
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise TensorError(f"grad shape {g.shape} != param shape {p.data.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- checkpoint format -----------------------------------------------------

CHECKPOINT_MAGIC = b"RFMP"


class CheckpointError(ValueError):
    pass


def save_checkpoint(entries, path):
    """Write named arrays to the RFMP binary format (payload always f32 LE)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", 1))
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            arr = np.asarray(arr)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<I", extent))
            f.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path):
    """Read an RFMP file back into an ordered {name: float32 array} dict."""
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if view[4] != 1:
        raise CheckpointError(f"{path}: unsupported version {view[4]}")
    (n_entries,) = struct.unpack_from("<I", view, 5)
    pos = 9
    out = {}
    try:
        for _ in range(n_entries):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            rank = view[pos]
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", view, pos) if rank else ()
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            out[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after {n_entries} entries")
    return out

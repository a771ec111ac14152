"""Initial node features: hashed featurizer, REMB files, random baseline.

The REMB binary format carries per-table float32 blocks in row-store
ordinal order and is the handoff point for externally computed row
embeddings.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .rowtext import linearize_row

REMB_MAGIC = b"REMB"


class EmbeddingError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    """Per-table dense feature blocks, all sharing one embedding dim."""

    blocks: dict  # table name -> float32 array (n_rows, dim), insertion order
    dim: int

    def validate(self):
        for name, block in self.blocks.items():
            if block.ndim != 2 or block.shape[1] != self.dim:
                raise EmbeddingError(f"table {name!r}: block shape {block.shape} "
                                     f"inconsistent with dim {self.dim}")
            if not np.isfinite(block).all():
                raise EmbeddingError(f"table {name!r}: non-finite values")
        return self

    @property
    def table_names(self):
        return list(self.blocks)

    def concat(self, table_order=None):
        """Stack blocks into one (total_rows, dim) matrix."""
        order = table_order if table_order is not None else self.table_names
        parts = [self.blocks[t] for t in order]
        if not parts:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.concatenate(parts, axis=0)

    def value_range(self):
        lo, hi = np.inf, -np.inf
        for block in self.blocks.values():
            if block.size:
                lo = min(lo, float(block.min()))
                hi = max(hi, float(block.max()))
        if lo > hi:
            raise EmbeddingError("value range of an empty embedding matrix")
        return lo, hi


def _token_bucket(token, dim, seed):
    """Stable (bucket, sign) pair for a token under a given seed."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=9,
                             key=seed.to_bytes(8, "little", signed=True)).digest()
    value = int.from_bytes(digest[:8], "little")
    sign = 1.0 if digest[8] & 1 else -1.0
    return value % dim, sign


def encode_hashed(manifest, store, dim, seed):
    """Sign-hash bag-of-tokens featurizer over linearized row text.

    Each whitespace token adds +-1 to one bucket; rows are scaled by
    1/sqrt(token count) so dense rows don't dominate.
    """
    if dim <= 0:
        raise EmbeddingError("dim must be positive")
    cache = {}
    blocks = {}
    for t in manifest.tables:
        rows = store.table(t.name)
        block = np.zeros((rows.n_rows, dim), dtype=np.float32)
        for i in range(rows.n_rows):
            tokens = linearize_row(manifest, store, t.name, i).text.split()
            if not tokens:
                continue
            for tok in tokens:
                hit = cache.get(tok)
                if hit is None:
                    hit = cache[tok] = _token_bucket(tok, dim, seed)
                block[i, hit[0]] += hit[1]
            block[i] /= np.sqrt(len(tokens))
        blocks[t.name] = block
    return EmbeddingMatrix(blocks=blocks, dim=dim).validate()


def gen_random_embeddings(reference, seed):
    """Uniform baseline matched to the reference's global value range."""
    lo, hi = reference.value_range()
    rng = np.random.default_rng(seed)
    blocks = {name: rng.uniform(lo, hi, size=block.shape).astype(np.float32)
              for name, block in reference.blocks.items()}
    return EmbeddingMatrix(blocks=blocks, dim=reference.dim).validate()


def write_embedding_file(matrix, path):
    """Serialize to REMB: header, table directory, then row-major f32 blocks."""
    matrix.validate()
    with open(path, "wb") as f:
        f.write(REMB_MAGIC)
        f.write(struct.pack("<BBH", 1, 4, 0))  # version, float_width, reserved
        f.write(struct.pack("<II", matrix.dim, len(matrix.blocks)))
        for name, block in matrix.blocks.items():
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<Q", block.shape[0]))
        for block in matrix.blocks.values():
            f.write(block.astype("<f4").tobytes(order="C"))
    return path


def load_embedding_file(path, manifest=None, store=None):
    """Read a REMB file; optionally cross-check names and counts."""
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    if len(blob) < 16 or bytes(view[:4]) != REMB_MAGIC:
        raise EmbeddingError(f"{path}: bad magic")
    version, float_width, reserved = struct.unpack_from("<BBH", view, 4)
    if version != 1:
        raise EmbeddingError(f"{path}: unsupported version {version}")
    if float_width != 4:
        raise EmbeddingError(f"{path}: unsupported float width {float_width}")
    dim, n_tables = struct.unpack_from("<II", view, 8)
    pos = 16
    directory = []
    try:
        for _ in range(n_tables):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            (row_count,) = struct.unpack_from("<Q", view, pos)
            pos += 8
            directory.append((name, row_count))
    except struct.error as exc:
        raise EmbeddingError(f"{path}: unexpected end of file") from exc
    blocks = {}
    for name, row_count in directory:
        count = row_count * dim
        if pos + 4 * count > len(blob):
            raise EmbeddingError(f"{path}: unexpected end of file in table {name!r}")
        arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos)
        blocks[name] = arr.reshape(row_count, dim).copy()
        pos += 4 * count
    if pos != len(blob):
        raise EmbeddingError(f"{path}: trailing bytes")
    matrix = EmbeddingMatrix(blocks=blocks, dim=int(dim)).validate()
    if manifest is not None:
        expected = manifest.table_names
        if matrix.table_names != expected:
            raise EmbeddingError(
                f"{path}: tables {matrix.table_names} do not match manifest {expected}")
        if store is not None:
            for name in expected:
                have = matrix.blocks[name].shape[0]
                want = store.table(name).n_rows
                if have != want:
                    raise EmbeddingError(
                        f"{path}: table {name!r} row count mismatch ({have} != {want})")
    return matrix

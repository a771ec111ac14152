"""Schema-aware row linearization, unit-level masking, and corpus export.

Rows render as `<table> Name <attr> A1 <value> V1 ...`; table names,
attribute names and non-empty cell values are independently maskable
semantic units with category-specific probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .relmodel import ABSENT, days_to_date

TABLE_TOKEN = "<table>"
ATTR_TOKEN = "<attr>"
VALUE_TOKEN = "<value>"
MASK_TOKEN = "<mask>"

SPECIAL_TOKENS = (TABLE_TOKEN, ATTR_TOKEN, VALUE_TOKEN, MASK_TOKEN)

TABLE_NAME = "TABLE_NAME"
ATTR_NAME = "ATTR_NAME"
VALUE = "VALUE"

# per-category independent masking probabilities
MASK_PROBS = {TABLE_NAME: 0.30, ATTR_NAME: 0.20, VALUE: 0.40}


class UnmaskableRowError(ValueError):
    pass


class MaskPlanError(ValueError):
    pass


def escape_value(text):
    """Double the leading '<' of any literal special token inside a value."""
    for tok in SPECIAL_TOKENS:
        text = text.replace(tok, "<" + tok)
    return text


def unescape_value(text):
    for tok in SPECIAL_TOKENS:
        text = text.replace("<" + tok, tok)
    return text


def render_cell(value, kind):
    """Deterministic text form of a cell; absent cells become empty strings."""
    if value is ABSENT:
        return ""
    if kind == "integer":
        return str(int(value))
    if kind == "float":
        return repr(float(value))
    if kind == "date":
        return days_to_date(value)
    return escape_value(str(value))


@dataclass(frozen=True)
class Unit:
    category: str  # TABLE_NAME | ATTR_NAME | VALUE
    text: str      # rendered text, "" for empty values


@dataclass(frozen=True)
class LinearizedRow:
    table: str
    units: tuple[Unit, ...]

    @property
    def text(self):
        return self.render()

    def render(self, masked_indices=frozenset()):
        lexemes = []
        for i, unit in enumerate(self.units):
            marker = {TABLE_NAME: TABLE_TOKEN, ATTR_NAME: ATTR_TOKEN, VALUE: VALUE_TOKEN}
            lexemes.append(marker[unit.category])
            if i in masked_indices:
                lexemes.append(MASK_TOKEN)
            elif unit.text:
                lexemes.append(unit.text)
        return " ".join(lexemes)

    def maskable_indices(self, mask_names=True):
        out = []
        for i, unit in enumerate(self.units):
            if unit.category == VALUE:
                if unit.text:  # empty values are never masked
                    out.append(i)
            elif mask_names:
                out.append(i)
        return out


def linearize_row(manifest, store, table, ordinal):
    """Render one stored row into its tagged linearized form."""
    rows = store.table(table)
    if not (0 <= ordinal < rows.n_rows):
        raise IndexError(f"table {table!r}: ordinal {ordinal} out of range")
    spec = rows.spec
    units = [Unit(TABLE_NAME, table)]
    for col, value in zip(spec.columns, rows.cells[ordinal]):
        units.append(Unit(ATTR_NAME, col.name))
        units.append(Unit(VALUE, render_cell(value, col.kind)))
    return LinearizedRow(table=table, units=tuple(units))


def parse_linearized(text):
    """Recover (table, [(attr, value), ...]) from a rendered row."""
    parts = text.split()
    if not parts or parts[0] != TABLE_TOKEN:
        raise ValueError("linearized row must start with the table marker")
    segments = []  # (marker, words)
    for word in parts:
        if word in (TABLE_TOKEN, ATTR_TOKEN, VALUE_TOKEN):
            segments.append((word, []))
        else:
            segments[-1][1].append(word)
    table = " ".join(segments[0][1])
    pairs = []
    i = 1
    while i < len(segments):
        marker, words = segments[i]
        if marker != ATTR_TOKEN:
            raise ValueError(f"expected attribute marker, got {marker}")
        attr = " ".join(words)
        value = ""
        if i + 1 < len(segments) and segments[i + 1][0] == VALUE_TOKEN:
            value = unescape_value(" ".join(segments[i + 1][1]))
            i += 1
        pairs.append((attr, value))
        i += 1
    return table, pairs


@dataclass(frozen=True)
class MaskPlan:
    row_id: int
    masked: frozenset          # unit indices replaced by the mask token
    categories: tuple[str, ...]  # category of every unit in the row

    def __post_init__(self):
        if not self.masked:
            raise MaskPlanError("a mask plan must mask at least one unit")


def row_rng(seed, row_id):
    """Per-row generator so masking is deterministic and order-independent."""
    return np.random.default_rng(np.random.SeedSequence((seed, row_id)))


def sample_mask_plan(row, rng, row_id=0, mask_names=True):
    """Independently mask units by category probability; force at least one."""
    candidates = row.maskable_indices(mask_names=mask_names)
    if not candidates:
        raise UnmaskableRowError(f"row {row_id} of {row.table!r} has no maskable units")
    draws = rng.random(len(candidates))
    masked = {i for i, u in zip(candidates, draws)
              if u < MASK_PROBS[row.units[i].category]}
    if not masked:
        masked = {candidates[int(rng.integers(len(candidates)))]}
    return MaskPlan(row_id=row_id, masked=frozenset(masked),
                    categories=tuple(u.category for u in row.units))


def apply_mask(row, plan):
    """Returns (masked text, target text); target is the unmodified rendering."""
    for i in plan.masked:
        if not (0 <= i < len(row.units)):
            raise MaskPlanError(f"mask index {i} out of range")
    return row.render(plan.masked), row.render()


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]
    seed: int


def split_corpus(n_rows, seed):
    """Shuffled 70/10/20 split; floors for train and validation, rest is test."""
    if n_rows < 0:
        raise ValueError("n_rows must be non-negative")
    ids = np.random.default_rng(seed).permutation(n_rows)
    n_train = int(0.7 * n_rows)
    n_val = int(0.1 * n_rows)
    return CorpusSplit(
        train=tuple(int(i) for i in ids[:n_train]),
        validation=tuple(int(i) for i in ids[n_train:n_train + n_val]),
        test=tuple(int(i) for i in ids[n_train + n_val:]),
        seed=seed,
    )


def export_corpus(rows, split, out_dir, seed):
    """Write train targets plus statically masked validation/test pairs.

    Train masks are left to the consumer (re-sampled per epoch); validation
    and test masks are sampled once here from (seed, row id) and persisted.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def write(name, lines):
        (out_dir / name).write_text(
            "".join(line + "\n" for line in lines), encoding="utf-8")

    write("train.txt", [rows[i].render() for i in split.train])
    for split_name, ids in (("valid", split.validation), ("test", split.test)):
        masked_lines, target_lines = [], []
        for i in ids:
            plan = sample_mask_plan(rows[i], row_rng(seed, i), row_id=i)
            masked, target = apply_mask(rows[i], plan)
            masked_lines.append(masked)
            target_lines.append(target)
        write(f"{split_name}.masked.txt", masked_lines)
        write(f"{split_name}.target.txt", target_lines)
    return [out_dir / n for n in
            ("train.txt", "valid.masked.txt", "valid.target.txt",
             "test.masked.txt", "test.target.txt")]


def linearize_database(manifest, store, per_table_quota=None):
    """All rows of all tables as LinearizedRows, manifest table order.

    `per_table_quota` caps rows taken from each table (file order).
    """
    out = []
    for t in manifest.tables:
        n = store.table(t.name).n_rows
        if per_table_quota is not None:
            n = min(n, per_table_quota)
        for i in range(n):
            out.append(linearize_row(manifest, store, t.name, i))
    return out

"""Relational database ingestion and entity-graph construction.

Parses a JSON schema manifest plus CSV table files into an in-memory row
store, then builds the table-level schema graph and the row-level
heterogeneous entity graph with bidirectional typed edges.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

COLUMN_KINDS = ("text", "integer", "float", "date", "key")

ABSENT = None  # explicit marker for missing cells

# nodes without a timestamp never get excluded by a time bound
NO_TIMESTAMP = np.int64(-(2 ** 62))

EPOCH = date(1970, 1, 1)


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    nullable: bool = True


@dataclass(frozen=True)
class TableSpec:
    name: str
    file: str
    primary_key: str
    columns: tuple[ColumnSpec, ...]
    foreign_keys: tuple[tuple[str, str], ...] = ()  # (column, referenced table)
    time_column: str | None = None

    def column(self, name):
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)


@dataclass(frozen=True)
class SchemaManifest:
    tables: tuple[TableSpec, ...]

    def table(self, name):
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def table_names(self):
        return [t.name for t in self.tables]

    def links(self):
        """All (source table, fk column, target table) triples."""
        out = []
        for t in self.tables:
            for col, ref in t.foreign_keys:
                out.append((t.name, col, ref))
        return out


def parse_schema_manifest(path):
    """Load and validate a schema manifest from a JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(doc, dict) or "tables" not in doc:
        raise SchemaError(f"{path}: missing top-level 'tables' key")
    return validate_manifest_doc(doc["tables"])


def validate_manifest_doc(table_docs):
    tables = []
    names = set()
    for td in table_docs:
        name = td.get("name")
        if not isinstance(name, str) or not name:
            raise SchemaError("table without a name")
        if name in names:
            raise SchemaError(f"duplicate table name {name!r}")
        names.add(name)
        cols = []
        col_names = set()
        for cd in td.get("columns", []):
            cname, kind = cd.get("name"), cd.get("kind")
            if kind not in COLUMN_KINDS:
                raise SchemaError(f"table {name!r} column {cname!r}: unknown kind {kind!r}")
            if cname in col_names:
                raise SchemaError(f"table {name!r}: duplicate column {cname!r}")
            col_names.add(cname)
            cols.append(ColumnSpec(cname, kind, bool(cd.get("nullable", True))))
        pk = td.get("primary_key")
        if not isinstance(pk, str):
            raise SchemaError(f"table {name!r}: primary_key must be a single column name")
        if pk not in col_names:
            raise SchemaError(f"table {name!r}: primary key column {pk!r} not found")
        fks = []
        for fd in td.get("foreign_keys", []):
            col, ref = fd.get("column"), fd.get("references")
            if not isinstance(col, str) or not isinstance(ref, str):
                raise SchemaError(f"table {name!r}: composite or malformed foreign key {fd!r}")
            if col not in col_names:
                raise SchemaError(f"table {name!r}: foreign key column {col!r} not found")
            fks.append((col, ref))
        tc = td.get("time_column")
        if tc is not None and tc not in col_names:
            raise SchemaError(f"table {name!r}: time column {tc!r} not found")
        tables.append(TableSpec(
            name=name, file=td.get("file", f"{name}.csv"), primary_key=pk,
            columns=tuple(cols), foreign_keys=tuple(fks), time_column=tc,
        ))
    for t in tables:
        for col, ref in t.foreign_keys:
            if ref not in names:
                raise SchemaError(
                    f"table {t.name!r} foreign key {col!r}: referenced table {ref!r} not found")
    return SchemaManifest(tables=tuple(tables))


def manifest_to_doc(manifest):
    """Inverse of parse_schema_manifest, for writing manifests to disk."""
    tables = []
    for t in manifest.tables:
        tables.append({
            "name": t.name,
            "file": t.file,
            "primary_key": t.primary_key,
            "columns": [{"name": c.name, "kind": c.kind, "nullable": c.nullable}
                        for c in t.columns],
            "foreign_keys": [{"column": col, "references": ref}
                             for col, ref in t.foreign_keys],
            **({"time_column": t.time_column} if t.time_column else {}),
        })
    return {"tables": tables}


def parse_date_days(text):
    """ISO-8601 date (YYYY-MM-DD) to integer days since 1970-01-01."""
    d = date.fromisoformat(text)
    return (d - EPOCH).days


def days_to_date(days):
    return date.fromordinal(EPOCH.toordinal() + int(days)).isoformat()


def _parse_cell(raw, kind):
    """Returns (value, ok). Empty fields are absent; bad typed cells are not ok."""
    if raw == "":
        return ABSENT, True
    try:
        if kind == "integer":
            return int(raw), True
        if kind == "float":
            return float(raw), True
        if kind == "date":
            return parse_date_days(raw), True
    except ValueError:
        return ABSENT, False
    return raw, True  # text and key kinds stay strings


@dataclass
class TableRows:
    spec: TableSpec
    cells: list            # list of rows, each a list in manifest column order
    pk_index: dict         # primary-key value -> row ordinal
    timestamps: list | None  # days since epoch per row, None where absent
    warnings: int = 0      # count of unparseable typed cells recorded as absent

    @property
    def n_rows(self):
        return len(self.cells)


@dataclass
class RowStore:
    tables: dict  # table name -> TableRows (manifest order)

    def table(self, name):
        return self.tables[name]

    @property
    def total_rows(self):
        return sum(t.n_rows for t in self.tables.values())


def load_tables(manifest, root, row_cap=None):
    """Load every table CSV under `root` into a RowStore.

    `row_cap` keeps only the first N rows of each table (file order);
    default unlimited.
    """
    root = Path(root)
    tables = {}
    for spec in manifest.tables:
        path = root / spec.file
        if not path.exists():
            raise DataError(f"table {spec.name!r}: file not found: {path}")
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"table {spec.name!r}: empty file {path}") from None
            expected = {c.name for c in spec.columns}
            if set(header) != expected:
                raise DataError(
                    f"table {spec.name!r}: header {sorted(header)} does not match "
                    f"manifest columns {sorted(expected)}")
            col_pos = {name: header.index(name) for name in header}
            order = [col_pos[c.name] for c in spec.columns]
            kinds = [c.kind for c in spec.columns]
            pk_i = next(i for i, c in enumerate(spec.columns) if c.name == spec.primary_key)
            tc_i = (next(i for i, c in enumerate(spec.columns) if c.name == spec.time_column)
                    if spec.time_column else None)
            cells, pk_index, timestamps = [], {}, [] if tc_i is not None else None
            warnings = 0
            for row_num, raw in enumerate(reader):
                if row_cap is not None and len(cells) >= row_cap:
                    break
                if len(raw) != len(header):
                    raise DataError(
                        f"table {spec.name!r} row {row_num + 1}: expected "
                        f"{len(header)} fields, got {len(raw)}")
                row = []
                for j, kind in zip(order, kinds):
                    value, ok = _parse_cell(raw[j], kind)
                    if not ok:
                        warnings += 1
                    row.append(value)
                pk = row[pk_i]
                if pk is ABSENT:
                    raise DataError(f"table {spec.name!r} row {row_num + 1}: missing primary key")
                pk = str(pk)
                if pk in pk_index:
                    raise DataError(
                        f"table {spec.name!r} row {row_num + 1}: duplicate primary key {pk!r}")
                pk_index[pk] = len(cells)
                if timestamps is not None:
                    ts = row[tc_i]
                    timestamps.append(int(ts) if ts is not ABSENT else None)
                cells.append(row)
        tables[spec.name] = TableRows(
            spec=spec, cells=cells, pk_index=pk_index,
            timestamps=timestamps, warnings=warnings)
    return RowStore(tables=tables)


# -- graphs ----------------------------------------------------------------


def forward_relation(src_table, fk_column, dst_table):
    return f"{src_table}/{fk_column}/{dst_table}"


def inverse_relation(rel):
    return rel + "/rev" if not rel.endswith("/rev") else rel[:-4]


@dataclass(frozen=True)
class SchemaEdge:
    relation: str
    src_table: str
    fk_column: str
    dst_table: str
    direction: str  # "fwd" | "rev"


@dataclass(frozen=True)
class SchemaGraph:
    nodes: tuple[str, ...]
    edges: tuple[SchemaEdge, ...]


def build_schema_graph(manifest):
    """Table-level graph with one forward and one inverse edge per FK link."""
    edges = []
    for src, col, dst in manifest.links():
        rel = forward_relation(src, col, dst)
        edges.append(SchemaEdge(rel, src, col, dst, "fwd"))
        edges.append(SchemaEdge(inverse_relation(rel), dst, col, src, "rev"))
    return SchemaGraph(nodes=tuple(manifest.table_names), edges=tuple(edges))


@dataclass
class EntityGraph:
    """Heterogeneous relational entity graph over global row ordinals."""

    table_names: list                  # block order
    block_offsets: dict                # table -> (start, count); blocks partition [0, n)
    n_nodes: int
    edges: dict                        # relation -> int64 array of (src, dst), sorted
    timestamps: np.ndarray             # int64 per node, NO_TIMESTAMP where absent
    dangling_fk_count: int = 0
    _in_csr: tuple | None = field(default=None, repr=False)

    def node_table(self, ordinal):
        for name in self.table_names:
            start, count = self.block_offsets[name]
            if start <= ordinal < start + count:
                return name
        raise IndexError(ordinal)

    def global_ordinal(self, table, row):
        start, count = self.block_offsets[table]
        if not (0 <= row < count):
            raise IndexError(f"{table} row {row} out of range")
        return start + row

    def local_ordinal(self, ordinal):
        table = self.node_table(ordinal)
        return table, ordinal - self.block_offsets[table][0]

    def in_csr(self):
        """CSR adjacency over incoming edges pooled across all relations."""
        if self._in_csr is None:
            all_edges = ([e for e in self.edges.values() if len(e)] or
                         [np.empty((0, 2), dtype=np.int64)])
            stacked = np.concatenate(all_edges, axis=0)
            # sort by destination then source for deterministic neighbor order
            stacked = stacked[np.lexsort((stacked[:, 0], stacked[:, 1]))]
            counts = np.bincount(stacked[:, 1], minlength=self.n_nodes) \
                if len(stacked) else np.zeros(self.n_nodes, dtype=np.int64)
            ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
            self._in_csr = (ptr, stacked[:, 0].copy())
        return self._in_csr

    def in_neighbors(self, ordinal):
        ptr, idx = self.in_csr()
        return idx[ptr[ordinal]:ptr[ordinal + 1]]


def build_entity_graph(manifest, store, strict=False):
    """Row-level graph: one typed edge (plus inverse) per resolvable FK cell."""
    offsets = {}
    cursor = 0
    for t in manifest.tables:
        n = store.table(t.name).n_rows
        offsets[t.name] = (cursor, n)
        cursor += n
    n_nodes = cursor

    timestamps = np.full(n_nodes, NO_TIMESTAMP, dtype=np.int64)
    for t in manifest.tables:
        rows = store.table(t.name)
        if rows.timestamps is not None:
            start, _ = offsets[t.name]
            for i, ts in enumerate(rows.timestamps):
                if ts is not None:
                    timestamps[start + i] = ts

    edges = {}
    dangling = 0
    for src, col, dst in manifest.links():
        src_rows = store.table(src)
        dst_rows = store.table(dst)
        src_start, _ = offsets[src]
        dst_start, _ = offsets[dst]
        fk_i = next(i for i, c in enumerate(src_rows.spec.columns) if c.name == col)
        pairs = set()
        for i, row in enumerate(src_rows.cells):
            value = row[fk_i]
            if value is ABSENT:
                continue
            target = dst_rows.pk_index.get(str(value))
            if target is None:
                if strict:
                    raise DataError(
                        f"table {src!r} row {i}: dangling foreign key "
                        f"{col}={value!r} into {dst!r}")
                dangling += 1
                continue
            pairs.add((src_start + i, dst_start + target))
        rel = forward_relation(src, col, dst)
        fwd = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
        edges[rel] = fwd
        edges[inverse_relation(rel)] = fwd[:, ::-1][np.lexsort((fwd[:, 1], fwd[:, 0]))] \
            if len(fwd) else fwd.copy()
    # keep reverse edge lists lexicographically sorted too
    for rel in list(edges):
        e = edges[rel]
        if len(e):
            edges[rel] = e[np.lexsort((e[:, 1], e[:, 0]))]
    return EntityGraph(
        table_names=list(manifest.table_names),
        block_offsets=offsets, n_nodes=n_nodes, edges=edges,
        timestamps=timestamps, dangling_fk_count=dangling)


@dataclass
class GraphReport:
    ok: bool
    edge_counts: dict
    violations: list


def validate_graph(g):
    """Check EntityGraph invariants; returns per-relation counts and parity."""
    violations = []
    counts = {rel: len(e) for rel, e in g.edges.items()}
    # block ranges partition [0, n)
    covered = sorted(g.block_offsets[t] for t in g.table_names)
    pos = 0
    for start, count in covered:
        if start != pos:
            violations.append(f"block gap/overlap at ordinal {pos}")
        pos = start + count
    if pos != g.n_nodes:
        violations.append(f"blocks cover {pos} of {g.n_nodes} nodes")
    for rel, e in g.edges.items():
        if len(e):
            if e[:, 0].min() < 0 or e[:, 0].max() >= g.n_nodes \
                    or e[:, 1].min() < 0 or e[:, 1].max() >= g.n_nodes:
                violations.append(f"relation {rel}: edge endpoint out of range")
            seen = set(map(tuple, e))
            if len(seen) != len(e):
                violations.append(f"relation {rel}: duplicate edges")
        inv = inverse_relation(rel)
        if inv not in g.edges:
            violations.append(f"relation {rel}: inverse relation missing")
            continue
        fwd_set = {tuple(p) for p in g.edges[rel]}
        rev_set = {(v, u) for u, v in g.edges[inv]}
        for missing in sorted(fwd_set - rev_set):
            violations.append(f"relation {rel}: edge {missing} has no reverse under {inv}")
    return GraphReport(ok=not violations, edge_counts=counts, violations=violations)


def dump_graph(g, fileobj):
    """Debug edge dump, one `EDGE <relation> <t>:<i> <t>:<j>` line per edge."""
    for rel in sorted(g.edges):
        for u, v in g.edges[rel]:
            st, si = g.local_ordinal(int(u))
            dt, di = g.local_ordinal(int(v))
            fileobj.write(f"EDGE {rel} {st}:{si} {dt}:{di}\n")

"""Deterministic synthetic relational databases with controllable signal.

Star or chain schemas of categorical tables with FK links and increasing
timestamps. Labels can be planted either on an entity's own attribute
(node-local) or on the majority marker share of its linked child rows
(neighbor-aggregate), the latter being unreadable without message passing.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .relmodel import (days_to_date, load_tables, manifest_to_doc,
                       validate_manifest_doc)

MARKER_TOKEN = "sigmark"

NODE_LOCAL = "node-local"
NEIGHBOR_AGGREGATE = "neighbor-aggregate"


@dataclass
class SynthProfile:
    n_tables: int = 4
    rows_per_table: int = 2000
    topology: str = "star"          # star | chain
    attrs_per_table: int = 3
    vocab_size: int = 500
    signal_mode: str = NEIGHBOR_AGGREGATE
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.topology not in ("star", "chain"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if not (0.0 <= self.noise < 0.5):
            raise ValueError(f"noise rate must be in [0, 0.5), got {self.noise}")
        if self.signal_mode not in (NODE_LOCAL, NEIGHBOR_AGGREGATE):
            raise ValueError(f"unknown signal mode {self.signal_mode!r}")
        if self.n_tables < 2:
            raise ValueError("need at least an entity table and one child table")


def _table_doc(name, n_attrs, fk_target=None):
    columns = [{"name": "id", "kind": "key", "nullable": False}]
    if fk_target:
        columns.append({"name": "parent_id", "kind": "key", "nullable": True})
    columns += [{"name": f"a{j}", "kind": "text", "nullable": True}
                for j in range(n_attrs)]
    columns.append({"name": "ts", "kind": "date", "nullable": True})
    return {
        "name": name,
        "file": f"{name}.csv",
        "primary_key": "id",
        "columns": columns,
        "foreign_keys": ([{"column": "parent_id", "references": fk_target}]
                         if fk_target else []),
        "time_column": "ts",
    }


def generate_database(profile, out_dir):
    """Write schema.json plus one CSV per table; byte-identical per seed.

    Table 0 is the entity table. In star topology every other table holds
    child rows pointing at it; in chain topology table i points at i-1.
    The first attribute of child tables carries the planted marker signal;
    entity attributes are drawn from a tiny neutral set in
    neighbor-aggregate mode so they carry no label information.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(profile.seed)
    names = ["entities"] + [f"children{i}" for i in range(1, profile.n_tables)]
    docs = []
    for i, name in enumerate(names):
        if i == 0:
            docs.append(_table_doc(name, profile.attrs_per_table))
        else:
            parent = names[0] if profile.topology == "star" else names[i - 1]
            docs.append(_table_doc(name, profile.attrs_per_table, fk_target=parent))
    manifest = validate_manifest_doc(docs)
    (out_dir / "schema.json").write_text(
        json.dumps(manifest_to_doc(manifest), indent=2) + "\n", encoding="utf-8")

    n = profile.rows_per_table
    # latent per-entity marker share drives the neighbor-aggregate signal
    marker_share = rng.uniform(0.0, 1.0, size=n)
    entity_local_flag = rng.random(n) < 0.5
    # children are assigned to time-nearby parents (small backward jitter) so
    # that entity seed times spread across the date range for temporal splits
    jitter_window = max(1, n // 20)

    for i, (name, doc) in enumerate(zip(names, docs)):
        parent_table = None
        if doc["foreign_keys"]:
            parent_table = doc["foreign_keys"][0]["references"]
        feeds_entities = parent_table == names[0]
        parents = ((np.arange(n) - rng.integers(0, jitter_window, size=n)) % n
                   if parent_table else None)
        rand_tokens = rng.integers(0, profile.vocab_size,
                                   size=(n, profile.attrs_per_table))
        carries = (rng.random(n) < marker_share[parents]
                   if feeds_entities and profile.signal_mode == NEIGHBOR_AGGREGATE
                   else np.zeros(n, dtype=bool))
        with open(out_dir / doc["file"], "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow([c["name"] for c in doc["columns"]])
            for r in range(n):
                row = [f"{name}-{r}"]
                if parent_table:
                    row.append(f"{parent_table}-{int(parents[r])}")
                for j in range(profile.attrs_per_table):
                    if i == 0 and profile.signal_mode == NEIGHBOR_AGGREGATE:
                        # scrubbed: nothing label-correlated on the entity itself
                        row.append(f"plain{j}")
                    elif i == 0 and profile.signal_mode == NODE_LOCAL and j == 0:
                        row.append(MARKER_TOKEN if entity_local_flag[r]
                                   else f"tok{rand_tokens[r, j]}")
                    elif j == 0 and carries[r]:
                        row.append(MARKER_TOKEN)
                    else:
                        row.append(f"tok{rand_tokens[r, j]}")
                row.append(days_to_date(r))  # timestamps increase with row order
                w.writerow(row)
    store = load_tables(manifest, out_dir)
    return manifest, store


def plant_labels(manifest, store, profile, horizon_days=None):
    """Task rows (entity id, seed timestamp, label) for the entity table.

    Neighbor-aggregate mode: label 1 iff the majority of the entity's child
    rows dated at or before the seed time carry the marker token; entities
    with no such children get a fair coin flip (counted). Node-local mode:
    label read off the entity's own first attribute. Labels flip with the
    profile's noise rate.
    """
    rng = np.random.default_rng(np.random.SeedSequence((profile.seed, 0x1B)))
    entity = store.table("entities")
    n = entity.n_rows
    if horizon_days is None:
        # children land within the generator's jitter window after the parent
        horizon_days = max(1, n // 20)

    child_specs = [t for t in manifest.tables
                   for col, ref in t.foreign_keys if ref == "entities"]
    marked_before = [[] for _ in range(n)]  # per entity: (child ts, is_marked)
    for spec in child_specs:
        rows = store.table(spec.name)
        fk_i = next(k for k, c in enumerate(spec.columns) if c.name == "parent_id")
        a0_i = next(k for k, c in enumerate(spec.columns) if c.name == "a0")
        for r, row in enumerate(rows.cells):
            parent = row[fk_i]
            if parent is None:
                continue
            p_ord = entity.pk_index.get(str(parent))
            if p_ord is None:
                continue
            ts = rows.timestamps[r]
            marked_before[p_ord].append((ts, row[a0_i] == MARKER_TOKEN))

    rows_out = []
    coin_flips = 0
    for v in range(n):
        entity_ts = entity.timestamps[v] if entity.timestamps else 0
        seed_ts = (entity_ts if entity_ts is not None else 0) + horizon_days
        if profile.signal_mode == NODE_LOCAL:
            a0 = entity.cells[v][next(
                k for k, c in enumerate(entity.spec.columns) if c.name == "a0")]
            label = 1 if a0 == MARKER_TOKEN else 0
        else:
            visible = [m for ts, m in marked_before[v] if ts is not None and ts <= seed_ts]
            if not visible:
                label = int(rng.integers(2))
                coin_flips += 1
            else:
                label = int(sum(visible) * 2 > len(visible))
        if rng.random() < profile.noise:
            label = 1 - label
        rows_out.append((f"entities-{v}", seed_ts, label))
    return rows_out, coin_flips


def write_task_files(rows, out_dir, fractions=(0.6, 0.2)):
    """task.csv plus a task manifest whose time split hits `fractions`."""
    out_dir = Path(out_dir)
    with open(out_dir / "task.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["entity_id", "timestamp", "label"])
        for entity_id, ts, label in rows:
            w.writerow([entity_id, days_to_date(ts), label])
    times = np.sort(np.array([ts for _, ts, _ in rows]))
    val_start = int(times[int(fractions[0] * len(times))])
    test_start = int(times[int((fractions[0] + fractions[1]) * len(times))])
    manifest = {"entity_table": "entities",
                "time_split": {"val_start": days_to_date(val_start),
                               "test_start": days_to_date(test_start)}}
    (out_dir / "task.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                       encoding="utf-8")
    return out_dir / "task.csv", out_dir / "task.json"

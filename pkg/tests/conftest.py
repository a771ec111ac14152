import json

import numpy as np
import pytest

from relfm import relmodel

TOY_SCHEMA = {
    "tables": [
        {
            "name": "drivers",
            "file": "drivers.csv",
            "primary_key": "driverId",
            "columns": [
                {"name": "driverId", "kind": "key", "nullable": False},
                {"name": "surname", "kind": "text", "nullable": True},
                {"name": "number", "kind": "integer", "nullable": True},
            ],
            "foreign_keys": [],
        },
        {
            "name": "races",
            "file": "races.csv",
            "primary_key": "raceId",
            "columns": [
                {"name": "raceId", "kind": "key", "nullable": False},
                {"name": "name", "kind": "text", "nullable": True},
                {"name": "date", "kind": "date", "nullable": True},
            ],
            "foreign_keys": [],
            "time_column": "date",
        },
        {
            "name": "results",
            "file": "results.csv",
            "primary_key": "resultId",
            "columns": [
                {"name": "resultId", "kind": "key", "nullable": False},
                {"name": "driverId", "kind": "key", "nullable": True},
                {"name": "raceId", "kind": "key", "nullable": True},
                {"name": "position", "kind": "float", "nullable": True},
            ],
            "foreign_keys": [
                {"column": "driverId", "references": "drivers"},
                {"column": "raceId", "references": "races"},
            ],
        },
    ]
}

TOY_CSVS = {
    "drivers.csv": (
        "driverId,surname,number\n"
        "1,Hamilton,44\n"
        "2,Alonso,14\n"
        "3,Verstappen,1\n"
    ),
    "races.csv": (
        "raceId,name,date\n"
        "10,Monza,2021-09-12\n"
        "11,Spa,2021-08-29\n"
    ),
    "results.csv": (
        "resultId,driverId,raceId,position\n"
        "100,1,10,1.0\n"
        "101,2,10,2.0\n"
        "102,1,11,3.0\n"
        "103,3,11,4.0\n"
    ),
}


def write_toy_db(root, schema=None, csvs=None):
    root.mkdir(parents=True, exist_ok=True)
    (root / "schema.json").write_text(json.dumps(schema or TOY_SCHEMA))
    for name, body in (csvs or TOY_CSVS).items():
        (root / name).write_text(body)
    return root / "schema.json"


@pytest.fixture
def toy_db(tmp_path):
    schema_path = write_toy_db(tmp_path / "toy")
    manifest = relmodel.parse_schema_manifest(schema_path)
    store = relmodel.load_tables(manifest, tmp_path / "toy")
    return manifest, store


@pytest.fixture
def toy_graph(toy_db):
    manifest, store = toy_db
    return manifest, store, relmodel.build_entity_graph(manifest, store)


def brute_force_edges(manifest, store):
    """Independent nested-scan enumeration of all FK-to-PK edge matches."""
    offsets = {}
    cursor = 0
    for t in manifest.tables:
        offsets[t.name] = cursor
        cursor += store.table(t.name).n_rows
    edges = {}
    for t in manifest.tables:
        rows = store.table(t.name)
        for col, ref in t.foreign_keys:
            rel = relmodel.forward_relation(t.name, col, ref)
            fk_i = [c.name for c in t.columns].index(col)
            target = store.table(ref)
            found = set()
            for i, row in enumerate(rows.cells):
                if row[fk_i] is None:
                    continue
                for pk_value, j in target.pk_index.items():
                    if str(row[fk_i]) == pk_value:
                        found.add((offsets[t.name] + i, offsets[ref] + j))
            edges[rel] = found
            edges[relmodel.inverse_relation(rel)] = {(v, u) for u, v in found}
    return edges


def dense_gnn_oracle(params, graph, feats, seeds):
    """Whole-graph message passing with no sampling, plain numpy."""
    n = graph.n_nodes
    h = np.zeros((n, params.d_h))
    for table in graph.table_names:
        start, count = graph.block_offsets[table]
        w, b = params.proj[table]
        h[start:start + count] = feats.blocks[table].astype(np.float64) @ \
            w.data.astype(np.float64) + b.data.astype(np.float64)
    neighbors = [set([v]) for v in range(n)]  # self-loop in the mean
    for e in graph.edges.values():
        for u, v in e:
            neighbors[int(v)].add(int(u))
    for li, conv in enumerate(params.convs):
        means = np.stack([h[sorted(nbrs)].mean(axis=0) for nbrs in neighbors])
        h = h @ conv.w_self.data.astype(np.float64) \
            + means @ conv.w_neigh.data.astype(np.float64) \
            + conv.bias.data.astype(np.float64)
        if li < len(params.convs) - 1:
            h = np.maximum(h, 0.0)
    return h[np.asarray(seeds)]


def pairwise_auc_oracle(scored):
    """O(n^2) positive-negative pair comparison, ties counted one half."""
    pos = [s for s, l in scored if l == 1]
    neg = [s for s, l in scored if l == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))

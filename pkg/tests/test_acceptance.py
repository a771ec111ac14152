"""End-to-end acceptance checks, one test per shipping criterion.

Each test is self-contained, enforces its stated numeric tolerance, and
asserts its own runtime budget so regressions in speed fail loudly too.
"""

import time

import numpy as np
import pytest

from relfm import downstream as ds
from relfm import hetgnn, pretrain, rowtext, synth
from relfm import relmodel
from relfm import tensor as T
from relfm.encoders import encode_hashed, gen_random_embeddings
from conftest import brute_force_edges, pairwise_auc_oracle, write_toy_db


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.monotonic()
        return self

    def __exit__(self, *exc):
        if exc[0] is None:
            elapsed = time.monotonic() - self.start
            assert elapsed < self.seconds, \
                f"runtime budget exceeded: {elapsed:.1f}s > {self.seconds}s"


def test_loss_oracle_suite():
    """Hand-constructed reconstruction loss values match closed form to 1e-6."""
    with Budget(1.0):
        cfg = pretrain.PretrainConfig()  # alpha 0.7, gamma 2
        full = np.ones((1, 2), dtype=bool)

        # aligned reconstruction: cosine term vanishes
        x = np.array([[3.0, 4.0]])
        assert pretrain.scaled_cosine_loss(T.Tensor(x), x, full).item() == \
            pytest.approx(0.0, abs=1e-6)
        # orthogonal: (1 - 0)^2 = 1
        assert pretrain.scaled_cosine_loss(
            T.Tensor([[1.0, 0.0]]), np.array([[0.0, 1.0]]), full).item() == \
            pytest.approx(1.0, abs=1e-6)
        # antiparallel: (1 - (-1))^2 = 4
        assert pretrain.scaled_cosine_loss(
            T.Tensor([[-3.0, -4.0]]), np.array([[3.0, 4.0]]), full).item() == \
            pytest.approx(4.0, abs=1e-6)
        # blended: 0.7 * 1 (orthogonal) + 0.3 * 2 (unit errors on both dims)
        total, l_cos, l_mse = pretrain.combined_loss(
            T.Tensor([[0.0, 1.0]]), np.array([[1.0, 0.0]]), full, cfg)
        assert l_cos.item() == pytest.approx(1.0, abs=1e-6)
        assert l_mse.item() == pytest.approx(2.0, abs=1e-6)
        assert total.item() == pytest.approx(1.3, abs=1e-6)


def _max_rel_error(params, loss_fn, eps=1e-6):
    """Central finite differences over every parameter entry."""
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        # parameters untouched by this subgraph legitimately have zero grads
        grad = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + eps
            up = loss_fn().item()
            flat[k] = keep - eps
            dn = loss_fn().item()
            flat[k] = keep
            fd = (up - dn) / (2 * eps)
            g = grad.ravel()[k]
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-3)
            worst = max(worst, rel)
    return worst


def test_gradient_checks(toy_graph, tmp_path):
    """Analytic gradients of both training losses match 64-bit central
    differences to 1e-4 relative error over 20 seeds on <=500-param models."""
    with Budget(30.0):
        manifest, store, g = toy_graph
        feats = encode_hashed(manifest, store, dim=3, seed=0)
        cfg = pretrain.PretrainConfig(fanout=(3, 2))

        for seed in range(20):
            params = hetgnn.init_params(g.table_names, d_in=3, d_h=2, layers=2,
                                        seed=seed, dtype=np.float64)
            plist = params.parameters()
            assert sum(p.data.size for p in plist) <= 500
            rng = np.random.default_rng(seed)
            sub = hetgnn.sample_neighborhood(g, [0, 4, 6], cfg.fanout, rng)
            x_local = hetgnn.gather_features(sub, feats, g.block_offsets).astype(
                np.float64)
            target = x_local[sub.seed_locals].copy()
            mask = rng.random(target.shape) < 0.5
            mask[:, 0] = True
            masked = x_local.copy()
            masked[sub.seed_locals] = np.where(mask, 0.0, target)

            def pretrain_loss():
                h = hetgnn.forward(params, sub, None, x_local=masked.copy())
                x_hat = hetgnn.decode_reconstruction(params, h)
                total, _, _ = pretrain.combined_loss(x_hat, target, mask, cfg)
                return total

            assert _max_rel_error(plist, pretrain_loss) < 1e-4

        task_rows = [ds.TaskRow("1", 18620, 1), ds.TaskRow("2", 18650, 0),
                     ds.TaskRow("3", 18700, 1)]
        dcfg = ds.DownstreamConfig(fanout=(3, 2), hidden_channels=2, layers=2,
                                   date_dim=2, head_hidden=(3,), dropout_keep=1.0)
        for seed in range(20):
            dcfg.seed = seed
            model = ds.init_model(g, 3, ds.FINETUNE, dcfg,
                                  train_times=[r.timestamp for r in task_rows],
                                  entity_table="drivers", dtype=np.float64)
            plist = model.trainable_parameters()
            assert sum(p.data.size for p in plist) <= 500

            def downstream_loss():
                logits = ds.forward_task(model, g, store, feats, task_rows,
                                         training=False,
                                         rng=np.random.default_rng(7))
                return T.softmax_cross_entropy(logits, [r.label for r in task_rows])

            assert _max_rel_error(plist, downstream_loss) < 1e-4


def test_graph_construction_oracle(tmp_path):
    """Typed edges match nested-scan enumeration on 20 random databases,
    and every forward edge has its reverse counterpart."""
    with Budget(10.0):
        rng = np.random.default_rng(2024)
        for trial in range(20):
            n_drv = int(rng.integers(1, 30))
            n_race = int(rng.integers(1, 20))
            n_res = int(rng.integers(0, 120))
            csvs = {
                "drivers.csv": "driverId,surname,number\n" + "".join(
                    f"d{i},s{i},{i}\n" for i in range(n_drv)),
                "races.csv": "raceId,name,date\n" + "".join(
                    f"r{i},race{i},{relmodel.days_to_date(18000 + i)}\n"
                    for i in range(n_race)),
                "results.csv": "resultId,driverId,raceId,position\n" + "".join(
                    f"x{i},d{rng.integers(0, n_drv + 3)},"
                    f"{'' if rng.random() < 0.15 else f'r{rng.integers(0, n_race)}'},"
                    f"{float(i)}\n" for i in range(n_res)),
            }
            root = tmp_path / f"db{trial}"
            write_toy_db(root, csvs=csvs)
            manifest = relmodel.parse_schema_manifest(root / "schema.json")
            store = relmodel.load_tables(manifest, root)
            g = relmodel.build_entity_graph(manifest, store)
            expect = brute_force_edges(manifest, store)
            assert set(g.edges) == set(expect)
            for rel, pairs in expect.items():
                assert {tuple(p) for p in g.edges[rel]} == pairs, rel
            report = relmodel.validate_graph(g)
            assert report.ok, report.violations


def _hub_graph(n_children=60):
    """One hub entity with dense in-edges and timestamped children."""
    rel = "kids/parent/hub"
    fwd = np.array([(i + 1, 0) for i in range(n_children)], dtype=np.int64)
    timestamps = np.concatenate([[relmodel.NO_TIMESTAMP],
                                 np.arange(n_children)]).astype(np.int64)
    return relmodel.EntityGraph(
        table_names=["hub", "kids"],
        block_offsets={"hub": (0, 1), "kids": (1, n_children)},
        n_nodes=n_children + 1,
        edges={rel: fwd, relmodel.inverse_relation(rel): fwd[:, ::-1].copy()},
        timestamps=timestamps)


def test_sampler_properties():
    """Fanout caps (20, 10) hold over 1e5 frontier expansions, and the
    temporal bound makes future neighbors irrelevant to the output."""
    with Budget(30.0):
        g = _hub_graph(60)
        fanout = (20, 10)
        frontiers = 0
        rng = np.random.default_rng(0)
        while frontiers < 100_000:
            sub = hetgnn.sample_neighborhood(g, [0] * 2000, fanout, rng)
            for cap, counts in zip(fanout, sub.hop_sample_counts):
                assert all(c <= cap for c in counts)
                frontiers += len(counts)

        # perturbation: nodes beyond the time bound cannot change anything
        params = hetgnn.init_params(g.table_names, d_in=4, d_h=4, seed=0)
        feats = type("M", (), {})()
        from relfm.encoders import EmbeddingMatrix
        base_rng = np.random.default_rng(1)
        blocks = {"hub": base_rng.normal(size=(1, 4)).astype(np.float32),
                  "kids": base_rng.normal(size=(60, 4)).astype(np.float32)}
        feats = EmbeddingMatrix(blocks=blocks, dim=4)
        bound = 29  # children 30..59 are in the future
        sub = hetgnn.sample_neighborhood(g, [0], (100, 100),
                                         np.random.default_rng(3), time_bound=bound)
        assert all(g.timestamps[gid] <= bound for gid in sub.global_ids[1:])
        out_before = hetgnn.forward(params, sub, feats, g.block_offsets).data.copy()

        perturbed = EmbeddingMatrix(
            blocks={"hub": blocks["hub"],
                    "kids": blocks["kids"].copy()}, dim=4)
        perturbed.blocks["kids"][30:] += 100.0  # scramble future rows only
        sub2 = hetgnn.sample_neighborhood(g, [0], (100, 100),
                                          np.random.default_rng(3), time_bound=bound)
        out_after = hetgnn.forward(params, sub2, perturbed, g.block_offsets).data
        assert out_before.tobytes() == out_after.tobytes()


def test_masking_marginals(toy_db):
    """Category mask rates land within 0.02 of (0.30, 0.20, 0.40) over 1e4
    rows and every plan masks at least one unit."""
    with Budget(5.0):
        manifest, store = toy_db
        row = rowtext.linearize_row(manifest, store, "results", 0)
        hits = {c: 0 for c in rowtext.MASK_PROBS}
        totals = {c: 0 for c in rowtext.MASK_PROBS}
        for rid in range(10_000):
            plan = rowtext.sample_mask_plan(row, rowtext.row_rng(0, rid), row_id=rid)
            assert plan.masked  # at-least-one rule
            for i, unit in enumerate(row.units):
                totals[unit.category] += 1
                hits[unit.category] += i in plan.masked
        for cat, p in ((rowtext.TABLE_NAME, 0.30), (rowtext.ATTR_NAME, 0.20),
                       (rowtext.VALUE, 0.40)):
            assert hits[cat] / totals[cat] == pytest.approx(p, abs=0.02), cat


def test_metric_oracle():
    """ROC-AUC equals the O(n^2) pairwise oracle (ties included), and a
    constant classifier collapses accuracy to the 70.5% majority prior."""
    with Budget(5.0):
        fixture = [(0.8, 1), (0.6, 0), (0.6, 1), (0.2, 0)]
        assert ds.roc_auc(fixture) == pytest.approx(0.875, abs=1e-12)

        rng = np.random.default_rng(77)
        for trial in range(12):
            n = int(rng.integers(2, 1001))
            scores = np.round(rng.random(n), 2)
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scored = list(zip(scores, labels))
            assert ds.roc_auc(scored) == pytest.approx(
                pairwise_auc_oracle(scored), abs=1e-10)

        labels = [1] * 705 + [0] * 295
        precision, accuracy, _ = ds.precision_accuracy_f1([1.0] * 1000, labels)
        assert accuracy == pytest.approx(0.705, abs=1e-12)
        precision, accuracy, _ = ds.precision_accuracy_f1(
            [0.0] * 1000, [1] * 295 + [0] * 705)
        assert precision is ds.UNDEFINED
        assert accuracy == pytest.approx(0.705, abs=1e-12)


def test_masking_rate_direction(tmp_path):
    """Held-out per-dim masked reconstruction error is non-decreasing in the
    masking probability {0.15, 0.25, 0.50, 1.00} (median of 3 seeds) on the
    default synthetic profile.

    Features are mixed through a dense random matrix so that dimensions are
    mutually informative, as with learned row embeddings; heavier masking
    then strictly removes recoverable signal. Each seed pretrains once at
    the default rate and is probed under every masking rate with static
    held-out masks.
    """
    with Budget(300.0):
        from relfm.encoders import EmbeddingMatrix
        profile = synth.SynthProfile()  # 4 tables x 2000 rows
        manifest, store = synth.generate_database(profile, tmp_path / "db")
        graph = relmodel.build_entity_graph(manifest, store)
        dim = 32
        base = encode_hashed(manifest, store, dim=dim, seed=0)
        mix = np.random.default_rng(99).normal(
            size=(dim, dim)).astype(np.float32) / np.sqrt(dim)
        feats = EmbeddingMatrix(
            blocks={t: b @ mix for t, b in base.blocks.items()}, dim=dim)

        rates = (0.15, 0.25, 0.50, 1.00)
        per_seed = []
        for seed in range(3):
            cfg = pretrain.PretrainConfig(
                mask_prob=0.15, epochs=14, batch_size=2048, fanout=(5, 5),
                hidden_channels=32, lr=3e-3, seed=seed)
            params, _ = pretrain.run_pretraining([(graph, feats)], cfg)
            losses = []
            for p in rates:
                draws = []
                for rep in range(3):
                    db = pretrain.PretrainDatabase(graph=graph, feats=feats)
                    rng = np.random.default_rng(
                        np.random.SeedSequence((seed, rep, 0xA2)))
                    db.val_seeds = rng.permutation(graph.n_nodes)[:graph.n_nodes // 5]
                    db.val_masks = {int(s): pretrain.sample_dim_mask(dim, p, rng)
                                    for s in db.val_seeds}
                    draws.append(pretrain.evaluate_heldout_mse(params[0], db, cfg))
                losses.append(float(np.mean(draws)))
            per_seed.append(losses)
        medians = np.median(np.array(per_seed), axis=0)
        assert (np.diff(medians) >= 0).all(), medians


def _ablation_setup(tmp_path, n_rows=600, seed=0):
    profile = synth.SynthProfile(n_tables=3, rows_per_table=n_rows, seed=seed)
    manifest, store = synth.generate_database(profile, tmp_path / f"db{seed}")
    rows, _ = synth.plant_labels(manifest, store, profile)
    synth.write_task_files(rows, tmp_path / f"db{seed}")
    graph = relmodel.build_entity_graph(manifest, store)
    feats = encode_hashed(manifest, store, dim=32, seed=0)
    task = ds.load_task_table(tmp_path / f"db{seed}" / "task.csv", "entities", store)
    _, val_start, test_start = ds.load_task_manifest(
        tmp_path / f"db{seed}" / "task.json")
    ds.assign_time_splits(task, val_start, test_start)
    return manifest, store, graph, feats, task


def test_planted_signal_ablation(tmp_path):
    """Across the six {features} x {GNN usage} arms, informative+finetuned
    wins, informative GNN arms beat no-GNN by >= 0.10 AUC, and the scrubbed
    no-GNN arm sits within 0.05 of chance (median of 3 seeds)."""
    with Budget(600.0):
        per_seed = []
        for seed in range(3):
            _, store, graph, feats, task = _ablation_setup(
                tmp_path, n_rows=1000, seed=seed)
            pcfg = pretrain.PretrainConfig(
                epochs=6, batch_size=512, fanout=(10, 5), hidden_channels=32,
                lr=3e-3, seed=seed)
            params, _ = pretrain.run_pretraining([(graph, feats)], pcfg)
            pretrained = pretrain.shared_checkpoint_entries(params[0])
            cfg = ds.DownstreamConfig(
                lr=1e-2, epochs=25, batch_size=64, seed=seed, fanout=(10, 5),
                hidden_channels=32, date_dim=8, head_hidden=(32, 16))
            rows = ds.run_ablation(
                graph, store,
                {"informative": feats, "random": gen_random_embeddings(feats, seed)},
                task, cfg, pretrained)
            per_seed.append({name: auc for name, _, auc, _, _, _ in rows})
        med = {name: float(np.median([s[name] for s in per_seed]))
               for name in per_seed[0]}
        best = max(med, key=med.get)
        assert best == "informative+finetuned", med
        for arm in ("informative+frozen", "informative+finetuned"):
            assert med[arm] >= med["informative+none"] + 0.10, med
        assert abs(med["informative+none"] - 0.5) <= 0.05, med


def test_transfer_direction(tmp_path):
    """Pretrain on two synthetic databases, adapt to a third unseen one:
    fine-tuned matches or beats frozen (median of 3 seeds) and frozen conv
    parameters stay bit-identical through adaptation."""
    with Budget(600.0):
        sources = []
        for i in (10, 11):
            profile = synth.SynthProfile(n_tables=3, rows_per_table=600, seed=i)
            manifest, store = synth.generate_database(profile, tmp_path / f"src{i}")
            graph = relmodel.build_entity_graph(manifest, store)
            sources.append((graph, encode_hashed(manifest, store, dim=32, seed=0)))

        _, store, graph, feats, task = _ablation_setup(tmp_path, n_rows=1000, seed=12)

        frozen_aucs, finetuned_aucs = [], []
        for seed in range(3):
            pcfg = pretrain.PretrainConfig(
                epochs=10, batch_size=512, fanout=(10, 5), hidden_channels=32,
                lr=3e-3, seed=seed)
            params, _ = pretrain.run_pretraining(sources, pcfg)
            pretrained = pretrain.shared_checkpoint_entries(params[0])
            cfg = ds.DownstreamConfig(
                lr=7e-3, epochs=30, batch_size=64, seed=seed, fanout=(10, 5),
                hidden_channels=32, date_dim=8, head_hidden=(32, 16))

            frozen_model, _ = ds.train_downstream(
                pretrained, graph, store, feats, task, ds.FROZEN, cfg)
            for i, conv in enumerate(frozen_model.gnn.convs, start=1):
                assert conv.w_self.data.tobytes() == \
                    pretrained[f"conv{i}.self.W"].tobytes()
                assert conv.w_neigh.data.tobytes() == \
                    pretrained[f"conv{i}.neigh.W"].tobytes()
                assert conv.bias.data.tobytes() == pretrained[f"conv{i}.b"].tobytes()
            frozen_aucs.append(ds.evaluate_split(
                frozen_model, graph, store, feats, task, "test", seed=seed)[0])

            tuned_model, _ = ds.train_downstream(
                pretrained, graph, store, feats, task, ds.FINETUNE, cfg)
            finetuned_aucs.append(ds.evaluate_split(
                tuned_model, graph, store, feats, task, "test", seed=seed)[0])

        assert np.median(finetuned_aucs) >= np.median(frozen_aucs), \
            (finetuned_aucs, frozen_aucs)


def test_determinism(tmp_path):
    """Two identical seeded end-to-end runs emit byte-identical metric CSVs."""
    from relfm import cli

    def run(tag):
        root = tmp_path / tag
        db = root / "db"
        assert cli.dispatch(["--deterministic", "synth", "--tables", "2",
                             "--rows", "80", "--seed", "3",
                             "--out", str(db)]) == 0
        graph = root / "g.pkl"
        assert cli.dispatch(["--deterministic", "build-graph", "--schema",
                             str(db / "schema.json"), "--out", str(graph)]) == 0
        feats = root / "f.remb"
        assert cli.dispatch(["--deterministic", "encode", "--graph", str(graph),
                             "--dim", "16", "--out", str(feats)]) == 0
        out = root / "adapt"
        assert cli.dispatch(["--deterministic", "adapt", "--graph", str(graph),
                             "--features", str(feats),
                             "--task", str(db / "task.csv"),
                             "--task-manifest", str(db / "task.json"),
                             "--mode", "finetune", "--epochs", "2",
                             "--out", str(out)]) == 0
        return (out / "metrics.csv").read_bytes()

    assert run("a") == run("b")

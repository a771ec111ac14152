import numpy as np
import pytest

from relfm import downstream as ds
from relfm import synth
from relfm.encoders import encode_hashed, gen_random_embeddings
from relfm.relmodel import build_entity_graph, days_to_date
from conftest import pairwise_auc_oracle


class TestRocAuc:
    def test_perfect_separation(self):
        assert ds.roc_auc([(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]) == 1.0

    def test_inverted(self):
        assert ds.roc_auc([(0.1, 1), (0.9, 0)]) == 0.0

    def test_known_fixture(self):
        # one tied positive-negative pair counts a half: 3.5 / 4
        scored = [(0.8, 1), (0.6, 0), (0.6, 1), (0.2, 0)]
        assert ds.roc_auc(scored) == pytest.approx(0.875)
        assert ds.roc_auc(scored) == pytest.approx(pairwise_auc_oracle(scored))

    def test_all_tied_is_half(self):
        assert ds.roc_auc([(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)]) == 0.5

    def test_single_class_raises(self):
        with pytest.raises(ds.MetricError):
            ds.roc_auc([(0.5, 1), (0.4, 1)])

    def test_matches_pairwise_oracle_randomized(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            n = int(rng.integers(2, 60))
            scores = np.round(rng.random(n), 2)  # rounding forces ties
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scored = list(zip(scores, labels))
            assert ds.roc_auc(scored) == pytest.approx(
                pairwise_auc_oracle(scored), abs=1e-12)

    def test_large_input_matches_oracle(self):
        rng = np.random.default_rng(9)
        scores = np.round(rng.random(1000), 2)
        labels = rng.integers(0, 2, size=1000)
        scored = list(zip(scores, labels))
        assert ds.roc_auc(scored) == pytest.approx(
            pairwise_auc_oracle(scored), abs=1e-9)


class TestThresholdMetrics:
    def test_hand_values(self):
        precision, accuracy, f1 = ds.precision_accuracy_f1(
            [0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0])
        assert precision == 0.5
        assert accuracy == 0.5
        assert f1 == pytest.approx(0.5)

    def test_precision_undefined_without_predicted_positives(self):
        precision, accuracy, f1 = ds.precision_accuracy_f1([0.1, 0.2], [1, 0])
        assert precision is ds.UNDEFINED
        assert accuracy == 0.5
        assert f1 == 0.0

    def test_f1_undefined_with_no_positives_anywhere(self):
        precision, accuracy, f1 = ds.precision_accuracy_f1([0.1, 0.2], [0, 0])
        assert precision is ds.UNDEFINED
        assert f1 is ds.UNDEFINED
        assert accuracy == 1.0

    def test_majority_class_collapse(self):
        # constant scorers collapse accuracy to the majority prior (70.5%)
        labels = [1] * 705 + [0] * 295
        precision, accuracy, f1 = ds.precision_accuracy_f1([1.0] * 1000, labels)
        assert accuracy == pytest.approx(0.705)
        assert precision == pytest.approx(0.705)
        labels = [1] * 295 + [0] * 705
        precision, accuracy, _ = ds.precision_accuracy_f1([0.0] * 1000, labels)
        assert precision is ds.UNDEFINED
        assert accuracy == pytest.approx(0.705)

    def test_empty_raises(self):
        with pytest.raises(ds.MetricError):
            ds.precision_accuracy_f1([], [])


class TestTaskTable:
    def _write(self, tmp_path, body):
        path = tmp_path / "task.csv"
        path.write_text("entity_id,timestamp,label\n" + body)
        return path

    def test_load_and_resolve(self, toy_db, tmp_path):
        _, store = toy_db
        path = self._write(tmp_path, "1,2021-01-01,1\n2,2021-06-01,0\n")
        task = ds.load_task_table(path, "drivers", store)
        assert task.entity_table == "drivers"
        assert task.rows[0] == ds.TaskRow("1", 18628, 1)

    def test_unknown_entity(self, toy_db, tmp_path):
        _, store = toy_db
        path = self._write(tmp_path, "99,2021-01-01,1\n")
        with pytest.raises(ds.TaskError, match="row 2.*unknown entity"):
            ds.load_task_table(path, "drivers", store)

    def test_bad_label(self, toy_db, tmp_path):
        _, store = toy_db
        path = self._write(tmp_path, "1,2021-01-01,2\n")
        with pytest.raises(ds.TaskError, match="label"):
            ds.load_task_table(path, "drivers", store)

    def test_bad_date(self, toy_db, tmp_path):
        _, store = toy_db
        path = self._write(tmp_path, "1,yesterday,1\n")
        with pytest.raises(ds.TaskError, match="unparseable date"):
            ds.load_task_table(path, "drivers", store)

    def test_bad_header(self, toy_db, tmp_path):
        _, store = toy_db
        path = tmp_path / "task.csv"
        path.write_text("id,when,y\n1,2021-01-01,1\n")
        with pytest.raises(ds.TaskError, match="header"):
            ds.load_task_table(path, "drivers", store)

    def test_time_splits(self, toy_db, tmp_path):
        _, store = toy_db
        path = self._write(tmp_path,
                           "1,2021-01-01,1\n2,2021-06-01,0\n3,2021-12-01,1\n")
        task = ds.load_task_table(path, "drivers", store)
        ds.assign_time_splits(task, val_start=ds.parse_date_days("2021-03-01"),
                              test_start=ds.parse_date_days("2021-09-01"))
        assert list(task.train_idx) == [0]
        assert list(task.val_idx) == [1]
        assert list(task.test_idx) == [2]
        assert task.subset("val")[0].entity_id == "2"

    def test_random_splits_partition(self, toy_db, tmp_path):
        _, store = toy_db
        body = "".join(f"{i},2021-01-01,{i % 2}\n" for i in (1, 2, 3))
        path = self._write(tmp_path, body)
        task = ds.load_task_table(path, "drivers", store)
        ds.assign_random_splits(task, seed=0)
        ids = sorted(list(task.train_idx) + list(task.val_idx) + list(task.test_idx))
        assert ids == [0, 1, 2]

    def test_manifest(self, tmp_path):
        path = tmp_path / "task.json"
        path.write_text('{"entity_table": "drivers", "time_split": '
                        '{"val_start": "1970-01-11", "test_start": "1970-01-21"}}')
        assert ds.load_task_manifest(path) == ("drivers", 10, 20)


@pytest.fixture(scope="module")
def synth_task(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthdb")
    profile = synth.SynthProfile(n_tables=2, rows_per_table=150, seed=7)
    manifest, store = synth.generate_database(profile, root)
    rows, _ = synth.plant_labels(manifest, store, profile)
    synth.write_task_files(rows, root)
    graph = build_entity_graph(manifest, store)
    feats = encode_hashed(manifest, store, dim=16, seed=0)
    task = ds.load_task_table(root / "task.csv", "entities", store)
    entity_table, val_start, test_start = ds.load_task_manifest(root / "task.json")
    ds.assign_time_splits(task, val_start, test_start)
    return manifest, store, graph, feats, task


def _small_cfg(**kw):
    base = dict(lr=1e-2, epochs=4, batch_size=32, seed=0, fanout=(5, 5),
                hidden_channels=16, date_dim=4, head_hidden=(8,))
    base.update(kw)
    return ds.DownstreamConfig(**base)


class TestModel:
    def test_frozen_excludes_shared_convs(self, synth_task):
        _, _, graph, feats, task = synth_task
        cfg = _small_cfg()
        frozen = ds.init_model(graph, feats.dim, ds.FROZEN, cfg,
                               train_times=[0, 5], entity_table="entities")
        tuned = ds.init_model(graph, feats.dim, ds.FINETUNE, cfg,
                              train_times=[0, 5], entity_table="entities")
        diff = len(tuned.trainable_parameters()) - len(frozen.trainable_parameters())
        assert diff == len(tuned.gnn.shared_parameters())
        assert all(not p.requires_grad for p in frozen.gnn.shared_parameters())

    def test_no_gnn_has_no_graph_params(self, synth_task):
        _, _, graph, feats, _ = synth_task
        model = ds.init_model(graph, feats.dim, ds.NO_GNN, _small_cfg(),
                              train_times=[0, 5], entity_table="entities")
        assert model.gnn is None
        names = set(model.named_parameters())
        assert not any(n.startswith(("proj", "conv")) for n in names)

    def test_pretrained_convs_are_loaded(self, synth_task):
        _, _, graph, feats, _ = synth_task
        cfg = _small_cfg()
        pre = {f"conv{i}.{part}": np.full(shape, 0.25, dtype=np.float32)
               for i in (1, 2)
               for part, shape in (("self.W", (16, 16)), ("neigh.W", (16, 16)),
                                   ("b", (16,)))}
        model = ds.init_model(graph, feats.dim, ds.FROZEN, cfg, pretrained=pre,
                              train_times=[0, 5], entity_table="entities")
        np.testing.assert_array_equal(model.gnn.convs[0].w_self.data,
                                      np.full((16, 16), 0.25))

    def test_degenerate_train_times_rejected(self, synth_task):
        _, _, graph, feats, _ = synth_task
        with pytest.raises(ds.TaskError, match="degenerate"):
            ds.init_model(graph, feats.dim, ds.NO_GNN, _small_cfg(),
                          train_times=[3, 3, 3], entity_table="entities")

    def test_date_encoder_standardizes(self, synth_task):
        _, _, graph, feats, _ = synth_task
        model = ds.init_model(graph, feats.dim, ds.NO_GNN, _small_cfg(),
                              train_times=[0, 10], entity_table="entities")
        assert model.date.mean == 5.0
        assert model.date.std == 5.0
        out = ds.encode_dates(model, [0, 5, 10])
        assert out.data.shape == (3, 4)

    def test_forward_shapes(self, synth_task):
        _, store, graph, feats, task = synth_task
        cfg = _small_cfg()
        for mode in (ds.NO_GNN, ds.FROZEN, ds.FINETUNE):
            model = ds.init_model(graph, feats.dim, mode, cfg,
                                  train_times=[0, 5], entity_table="entities")
            logits = ds.forward_task(model, graph, store, feats, task.rows[:6],
                                     training=False, rng=np.random.default_rng(0))
            assert logits.data.shape == (6, 2)

    def test_scores_are_probabilities(self, synth_task):
        _, store, graph, feats, task = synth_task
        model = ds.init_model(graph, feats.dim, ds.NO_GNN, _small_cfg(),
                              train_times=[0, 5], entity_table="entities")
        scores = ds.score_rows(model, graph, store, feats, task.rows[:20])
        assert scores.shape == (20,)
        assert (scores >= 0).all() and (scores <= 1).all()


class TestTraining:
    def test_frozen_convs_byte_identical_after_training(self, synth_task):
        _, store, graph, feats, task = synth_task
        cfg = _small_cfg(epochs=2)
        pre = None
        model, _ = ds.train_downstream(pre, graph, store, feats, task,
                                       ds.FROZEN, cfg)
        fresh = ds.init_model(graph, feats.dim, ds.FROZEN, cfg, pretrained=None,
                              train_times=[r.timestamp for r in task.subset("train")],
                              entity_table="entities")
        for a, b in zip(model.gnn.shared_parameters(), fresh.gnn.shared_parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_finetune_moves_convs(self, synth_task):
        _, store, graph, feats, task = synth_task
        cfg = _small_cfg(epochs=2)
        model, _ = ds.train_downstream(None, graph, store, feats, task,
                                       ds.FINETUNE, cfg)
        fresh = ds.init_model(graph, feats.dim, ds.FINETUNE, cfg, pretrained=None,
                              train_times=[r.timestamp for r in task.subset("train")],
                              entity_table="entities")
        assert any(a.data.tobytes() != b.data.tobytes()
                   for a, b in zip(model.gnn.shared_parameters(),
                                   fresh.gnn.shared_parameters()))

    def test_history_and_loss_decrease(self, synth_task):
        _, store, graph, feats, task = synth_task
        model, history = ds.train_downstream(None, graph, store, feats, task,
                                             ds.NO_GNN, _small_cfg(epochs=6))
        assert [h.epoch for h in history] == [1, 2, 3, 4, 5, 6]
        assert history[-1].train_loss < history[0].train_loss

    def test_best_val_checkpoint_restored(self, synth_task):
        _, store, graph, feats, task = synth_task
        cfg = _small_cfg(epochs=3)
        model, history = ds.train_downstream(None, graph, store, feats, task,
                                             ds.NO_GNN, cfg)
        best_epoch = int(np.nanargmax([h.val_auc for h in history]))
        assert history[best_epoch].val_auc == max(
            h.val_auc for h in history if not np.isnan(h.val_auc))

    def test_deterministic(self, synth_task):
        _, store, graph, feats, task = synth_task
        cfg = _small_cfg(epochs=2)
        m1, h1 = ds.train_downstream(None, graph, store, feats, task, ds.NO_GNN, cfg)
        m2, h2 = ds.train_downstream(None, graph, store, feats, task, ds.NO_GNN, cfg)
        assert [(h.train_loss, h.val_auc) for h in h1] == \
            [(h.train_loss, h.val_auc) for h in h2]
        for k, v in m1.named_parameters().items():
            assert v.data.tobytes() == m2.named_parameters()[k].data.tobytes()

    def test_empty_train_split_raises(self, synth_task):
        _, store, graph, feats, task = synth_task
        import copy
        broken = copy.copy(task)
        broken.train_idx = np.array([], dtype=np.int64)
        with pytest.raises(ds.TaskError, match="empty training split"):
            ds.train_downstream(None, graph, store, feats, broken, ds.NO_GNN,
                                _small_cfg())

    def test_evaluate_split_tuple(self, synth_task):
        _, store, graph, feats, task = synth_task
        model, _ = ds.train_downstream(None, graph, store, feats, task,
                                       ds.NO_GNN, _small_cfg(epochs=2))
        auc, precision, accuracy, f1 = ds.evaluate_split(
            model, graph, store, feats, task, "test")
        assert auc is ds.UNDEFINED or 0.0 <= auc <= 1.0
        assert 0.0 <= accuracy <= 1.0


class TestAblation:
    def test_six_rows_and_csv(self, synth_task, tmp_path):
        _, store, graph, feats, task = synth_task
        feats_by_source = {"informative": feats,
                           "random": gen_random_embeddings(feats, seed=1)}
        rows = ds.run_ablation(graph, store, feats_by_source, task,
                               _small_cfg(epochs=1), pretrained=None)
        assert [r[0] for r in rows] == [name for name, _, _ in ds.ABLATION_CONFIGS]
        assert all(r[1] == "test" for r in rows)
        path = tmp_path / "ablation.csv"
        ds.write_metrics_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "config,split,roc_auc,precision,accuracy,f1"
        assert len(lines) == 7

    def test_undefined_sentinel_in_csv(self, tmp_path):
        rows = [("c", "test", ds.UNDEFINED, ds.UNDEFINED, 0.5, 0.25)]
        path = tmp_path / "m.csv"
        ds.write_metrics_csv(rows, path)
        assert path.read_text().splitlines()[1] == \
            "c,test,undefined,undefined,0.500000,0.250000"

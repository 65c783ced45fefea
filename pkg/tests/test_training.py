"""Optimizer, schedules, config parsing, and the training loop's determinism
and bookkeeping on a miniature synthetic dataset."""

import numpy as np
import pytest

from biqa import autodiff as ad
from biqa import data as dat
from biqa import metrics as mx
from biqa import model as mdl
from biqa import training as tr
from biqa.errors import EmptySplit, MissingGradient, ParseError


def small_model(seed=0):
    cfg = mdl.ModelConfig(
        input_size=(16, 16),
        stream_a=mdl.BackboneSpec(stages=[mdl.StageSpec(4, convs=1), mdl.StageSpec(8, convs=1)]),
        stream_b=mdl.BackboneSpec(stages=[mdl.StageSpec(6, convs=1)]),
        head_widths=[12, 6],
        head_dropout=[0.25, 0.25],
    )
    return mdl.build_model(cfg, seed=seed)


@pytest.fixture(scope="module")
def mini_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("mini")
    manifest, _ = dat.synth_dataset(out, base_count=8, levels=4, size=16, seed=3)
    return dat.split(manifest, (0.6, 0.2, 0.2), seed=3)


class TestAdam:
    def test_zero_gradients_are_a_fixed_point(self):
        store = ad.ParamStore()
        t = store.add("w", np.array([1.0, -2.0], dtype=np.float32))
        before = t.data.copy()
        t.grad = np.zeros_like(t.data)
        tr.adam_step(store, lr=0.1, t=1)
        np.testing.assert_array_equal(t.data, before)

    def test_first_step_magnitude_near_lr(self):
        store = ad.ParamStore()
        t = store.add("w", np.array([0.0], dtype=np.float64))
        t.grad = np.array([1.0])
        tr.adam_step(store, lr=0.01, t=1)
        # bias-corrected ratio is 1 on the first step, so |update| ~ lr
        assert abs(-t.data[0] - 0.01) < 1e-8

    def test_missing_gradient(self):
        store = ad.ParamStore()
        store.add("w", np.ones(3, dtype=np.float32))
        with pytest.raises(MissingGradient):
            tr.adam_step(store, lr=0.1, t=1)

    def test_non_trainable_entries_skipped(self):
        store = ad.ParamStore()
        buf = store.add("running", np.ones(2, dtype=np.float32), trainable=False)
        w = store.add("w", np.ones(2, dtype=np.float32))
        w.grad = np.ones(2, dtype=np.float32)
        tr.adam_step(store, lr=0.1, t=1)
        np.testing.assert_array_equal(buf.data, 1.0)
        assert (w.data != 1.0).all()

    def test_deterministic(self):
        results = []
        for _ in range(2):
            store = ad.ParamStore()
            t = store.add("w", np.linspace(-1, 1, 5).astype(np.float32))
            for step in range(1, 4):
                t.grad = (t.data ** 2).astype(np.float32)
                tr.adam_step(store, lr=0.05, t=step)
            results.append(t.data.tobytes())
        assert results[0] == results[1]


class TestPlateauScheduler:
    def test_monotone_improvement_keeps_lr(self):
        s = tr.PlateauScheduler(1e-4, patience=2)
        for loss in (1.0, 0.9, 0.8):
            assert s.step(loss) == 1e-4

    def test_two_stalls_halve(self):
        s = tr.PlateauScheduler(1e-4, factor=0.5, patience=2)
        s.step(1.0)
        assert s.lr == 1e-4
        s.step(1.1)
        assert s.lr == 1e-4
        s.step(1.2)  # second consecutive epoch without improvement
        assert s.lr == 5e-5

    def test_floor(self):
        s = tr.PlateauScheduler(1e-8, factor=0.5, patience=1, min_lr=1e-8)
        for _ in range(5):
            s.step(2.0)
        assert s.lr == 1e-8

    def test_counter_resets_after_reduction(self):
        s = tr.PlateauScheduler(1.0, factor=0.5, patience=2)
        for loss in (1.0, 1.1, 1.2, 1.3):
            s.step(loss)
        assert s.lr == 0.5  # one reduction, stall counter restarted
        s.step(1.4)
        assert s.lr == 0.25


class TestEarlyStopper:
    def test_never_stops_while_improving(self):
        e = tr.EarlyStopper(patience=3)
        assert not any(e.step(loss) for loss in (1.0, 0.9, 0.8, 0.7, 0.6))

    def test_constant_losses_stop_at_patience_plus_one(self):
        e = tr.EarlyStopper(patience=10)
        decisions = [e.step(1.0) for _ in range(11)]
        assert decisions[:-1] == [False] * 10 and decisions[-1] is True

    def test_improvement_resets(self):
        e = tr.EarlyStopper(patience=10)
        for loss in [1.0] + [1.0] * 8 + [0.9]:
            assert not e.step(loss)
        assert not e.step(0.95)


class TestTrainConfigFile:
    def test_parse(self, tmp_path):
        p = tmp_path / "train.cfg"
        p.write_text(
            "# recipe\n"
            "initial_lr = 5e-4\n"
            "max_epochs=3\n"
            "batch_size=4\n"
            "seed = 12\n"
            "lambda2 = 5.0\n")
        cfg = tr.parse_train_config(p)
        assert cfg.initial_lr == 5e-4
        assert cfg.max_epochs == 3 and cfg.batch_size == 4 and cfg.seed == 12
        assert cfg.loss.lambda2 == 5.0 and cfg.loss.lambda1 == 1.0

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "train.cfg"
        p.write_text("momentum=0.9\n")
        with pytest.raises(ParseError, match="momentum"):
            tr.parse_train_config(p)

    def test_invalid_values(self, tmp_path):
        p = tmp_path / "train.cfg"
        p.write_text("batch_size=1\n")
        with pytest.raises(ParseError):
            tr.parse_train_config(p)


class TestTrainLoop:
    def _cfg(self, **kw):
        base = dict(max_epochs=2, batch_size=4, seed=5, initial_lr=1e-3)
        base.update(kw)
        return tr.TrainConfig(**base)

    def test_smoke_single_epoch(self, mini_dataset):
        train_m, val_m, _ = mini_dataset
        model = small_model()
        history, meta = tr.train(model, train_m, val_m, self._cfg(max_epochs=1))
        assert len(history.records) == 1
        assert history.best_epoch == 1
        assert meta["epoch"] == 1 and np.isfinite(meta["best_val_loss"])

    def test_two_runs_bit_identical(self, mini_dataset, tmp_path):
        train_m, val_m, _ = mini_dataset
        blobs = []
        for run in range(2):
            model = small_model(seed=1)
            history, meta = tr.train(model, train_m, val_m, self._cfg(max_epochs=2))
            path = tmp_path / f"run{run}.ckpt"
            mdl.save_checkpoint(model, path, meta)
            blobs.append((path.read_bytes(), history.to_csv()))
        assert blobs[0] == blobs[1]

    def test_history_lr_non_increasing(self, mini_dataset):
        train_m, val_m, _ = mini_dataset
        model = small_model(seed=2)
        history, _ = tr.train(model, train_m, val_m,
                              self._cfg(max_epochs=8, plateau_patience=1))
        lrs = [r.lr for r in history.records]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert all(lr >= 1e-8 for lr in lrs)

    def test_best_checkpoint_restored(self, mini_dataset):
        train_m, val_m, _ = mini_dataset
        model = small_model(seed=3)
        history, meta = tr.train(model, train_m, val_m, self._cfg(max_epochs=4))
        best = min(history.records, key=lambda r: r.val_loss)
        assert history.best_epoch == best.epoch
        assert meta["best_val_loss"] == pytest.approx(best.val_loss, abs=0)
        # restored parameters reproduce the recorded best validation loss
        val_m_norm = dat.normalize_scores(val_m)
        imgs, scores, paths = tr._load_split(val_m_norm, model.config.input_size, "val")
        preds = tr._predict_all(model, imgs, paths)
        loss, _ = mx.combined_loss(scores, preds)
        assert loss == pytest.approx(best.val_loss, rel=1e-6)

    def test_early_stop_cuts_run_short(self, mini_dataset):
        train_m, val_m, _ = mini_dataset
        model = small_model(seed=4)
        history, _ = tr.train(model, train_m, val_m,
                              self._cfg(max_epochs=50, early_stop_patience=2, initial_lr=1e-9,
                                        min_lr=1e-10))
        assert len(history.records) < 50

    def test_empty_split_rejected(self, mini_dataset):
        train_m, _, _ = mini_dataset
        empty = dat.Manifest([], (0.0, 1.0), train_m.base_dir)
        with pytest.raises(EmptySplit):
            tr.train(small_model(), train_m, empty, self._cfg())


class TestEvaluate:
    def test_perfect_model_metrics(self, monkeypatch, mini_dataset):
        _, _, test_m = mini_dataset
        model = small_model(seed=6)
        # tie-free truth over the same images
        tie_free = dat.Manifest(
            [dat.Sample(s.path, (i + 1) / len(test_m)) for i, s in enumerate(test_m.samples)],
            (0.0, 1.0), test_m.base_dir)
        truth = tie_free.scores()
        monkeypatch.setattr(
            tr, "_predict_all", lambda m, imgs, paths, batch_size=32: truth.copy())
        report, rows = tr.evaluate(model, tie_free)
        assert report.plcc == pytest.approx(1.0, abs=1e-12)
        assert (report.srocc, report.krocc) == (1.0, 1.0)
        assert report.mae == 0.0 and report.rmse == 0.0
        assert len(rows) == len(test_m)

    def test_constant_prediction_degenerates_gracefully(self, monkeypatch, mini_dataset):
        _, _, test_m = mini_dataset
        model = small_model(seed=7)
        monkeypatch.setattr(
            tr, "_predict_all",
            lambda m, imgs, paths, batch_size=32: np.zeros(len(test_m)))
        report, _ = tr.evaluate(model, test_m)
        assert report.plcc is None and report.srocc is None
        assert report.mae > 0.0

    def test_real_model_produces_report(self, mini_dataset):
        _, _, test_m = mini_dataset
        report, rows = tr.evaluate(small_model(seed=8), test_m)
        assert report.n == len(test_m)
        assert np.isfinite(report.mae) and np.isfinite(report.rmse)
        assert all(len(r) == 3 for r in rows)

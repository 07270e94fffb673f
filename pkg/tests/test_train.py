import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgseg.dataset import SegmentSet, Segment
from ecgseg.nn import Model, ModelConfig
from ecgseg.train import (
    CHECKPOINT_MAGIC,
    AdamState,
    CheckpointError,
    EarlyStopping,
    SearchSpace,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    fit,
    load_checkpoint,
    random_search,
    run_cv,
    sample_configs,
    save_checkpoint,
)

TINY = ModelConfig(conv_filters=(3,), lstm_units=(4,))


def adam_oracle(grads_seq, theta0, a=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar Adam, one step per gradient."""
    theta, m, v = theta0, 0.0, 0.0
    for t, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= a * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


class TestAdam:
    def test_first_step(self):
        params = {"w": np.array([0.0])}
        state = AdamState.zeros_like(params)
        adam_step(state, params, {"w": np.array([1.0])}, TrainConfig(dtype="float64"))
        assert params["w"][0] == pytest.approx(-0.001, rel=1e-6)
        assert state.t == 1

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=20))
    def test_matches_oracle(self, gs):
        params = {"w": np.array([0.5])}
        state = AdamState.zeros_like(params)
        cfg = TrainConfig(alpha=0.01, beta1=0.8, beta2=0.99, epsilon=1e-7)
        for g in gs:
            adam_step(state, params, {"w": np.array([g])}, cfg)
        assert params["w"][0] == pytest.approx(adam_oracle(gs, 0.5, 0.01, 0.8, 0.99, 1e-7), rel=1e-9, abs=1e-12)

    def test_non_finite_gradient_names_tensor(self):
        params = {"a": np.zeros(2), "b": np.zeros(2)}
        with pytest.raises(TrainingDiverged, match="'b'"):
            adam_step(AdamState.zeros_like(params), params, {"a": np.ones(2), "b": np.array([1, np.nan])}, TrainConfig())
        assert not params["a"].any()

    @pytest.mark.parametrize(
        "kw", [dict(alpha=0), dict(beta1=1.0), dict(beta2=-0.1), dict(epsilon=0), dict(patience=0), dict(batch_size=0)]
    )
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestEarlyStopping:
    def test_patience(self):
        es = EarlyStopping(patience=3)
        history = [es.update(e, v) for e, v in enumerate([1.0, 0.9, 0.95, 0.9, 0.91], start=1)]
        assert history == [(True, False), (True, False), (False, False), (False, False), (False, True)]
        assert es.best_epoch == 2

    def test_min_delta_strict(self):
        es = EarlyStopping(patience=1, min_delta=0.1)
        assert es.update(1, 1.0) == (True, False)
        assert es.update(2, 0.9) == (False, True)


def _toy_data(n=6, t=40, seed=0):
    rng = np.random.default_rng(seed)
    y = np.zeros((n, t), dtype=np.int64) + 3
    x = rng.normal(0, 0.1, size=(n, t))
    for i in range(n):
        for start in rng.integers(0, t - 6, size=2):
            cls = rng.integers(0, 3)
            y[i, start : start + 5] = cls
            x[i, start : start + 5] += (cls + 1) * 1.0
    return x, y


class TestFit:
    def test_loss_decreases_and_best_restored(self):
        x, y = _toy_data()
        model = Model.create(TINY, seed=0, dtype=np.float64)
        cfg = TrainConfig(alpha=0.02, batch_size=2, max_epochs=8, patience=8, dtype="float64")
        model, report = fit(model, (x, y), (x, y), cfg)
        losses = [e.val_loss for e in report.epochs]
        assert losses[-1] < losses[0]
        assert report.best_val_loss == min(losses)
        from ecgseg.train import evaluate_loss

        assert evaluate_loss(model, x, y)[0] == pytest.approx(report.best_val_loss, rel=1e-12)

    def test_early_stop_epoch(self):
        x, y = _toy_data()
        model = Model.create(TINY, seed=0)
        cfg = TrainConfig(alpha=1e-9, max_epochs=50, patience=2, dtype="float64", min_delta=1.0)
        _, report = fit(model, (x, y), (x, y), cfg)
        assert report.stopping_epoch == 3 and report.best_epoch == 1

    def test_same_seed_same_weights(self):
        x, y = _toy_data()
        cfg = TrainConfig(alpha=0.01, batch_size=2, max_epochs=2)
        a, _ = fit(Model.create(TINY, seed=0, dtype=np.float32), (x, y), (x, y), cfg)
        b, _ = fit(Model.create(TINY, seed=0, dtype=np.float32), (x, y), (x, y), cfg)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_divergence_raises(self):
        x, y = _toy_data()
        x[0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            fit(Model.create(TINY, seed=0), (x, y), (x, y), TrainConfig(max_epochs=1))

    def test_empty_rejected(self):
        x, y = _toy_data()
        with pytest.raises(ValueError):
            fit(Model.create(TINY), (x[:0], y[:0]), (x, y), TrainConfig())

    def test_report_csv(self):
        x, y = _toy_data()
        _, report = fit(Model.create(TINY), (x, y), (x, y), TrainConfig(max_epochs=2))
        lines = report.to_rows().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
        assert len(lines) == 3 and lines[1].startswith("1,")


class TestCvAndSearch:
    def _segments(self):
        x, y = _toy_data(n=6)
        return SegmentSet.from_segments([Segment(x[i], y[i].astype(np.uint8), f"r{i}", 0) for i in range(6)])

    def test_run_cv(self):
        seg = self._segments()
        folds = [[0, 1], [2, 3], [4, 5]]
        res = run_cv(seg, folds, TrainConfig(max_epochs=1), TINY)
        assert len(res.models) == len(res.reports) == 3
        assert res.segment_order.tolist() == [0, 1, 2, 3, 4, 5]
        assert res.probs.shape == (6 * 40, 4) and res.y_true.shape == (6 * 40,)
        np.testing.assert_array_equal(res.y_true, seg.labels.reshape(-1))

    def test_sample_configs_ranges(self):
        space = SearchSpace()
        cfgs = sample_configs(space, 200, seed=0, base=TrainConfig(max_epochs=3))
        for name in ("alpha", "beta1", "beta2", "epsilon"):
            vals = np.array([getattr(c, name) for c in cfgs])
            lo, hi = getattr(space, name)
            assert np.all((vals >= lo) & (vals <= hi))
        log_alpha = np.log10([c.alpha for c in cfgs])
        assert abs(np.median(log_alpha) + 3) < 0.3  # log-uniform on [1e-4, 1e-2]
        assert all(c.max_epochs == 3 for c in cfgs)
        assert sample_configs(space, 5, 1, TrainConfig()) == sample_configs(space, 5, 1, TrainConfig())

    def test_random_search_picks_lowest(self):
        x, y = _toy_data()
        best, trials = random_search((x, y), (x, y), SearchSpace(), 3, seed=0, base=TrainConfig(max_epochs=1), model_config=TINY)
        assert best == min(trials, key=lambda t: t.best_val_loss).config

    def test_random_search_all_diverged(self):
        x, y = _toy_data()
        x[0, 0] = np.inf
        with pytest.raises(TrainingDiverged, match="all 2 trials"):
            random_search((x, y), (x, y), SearchSpace(), 2, base=TrainConfig(max_epochs=1), model_config=TINY)


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip_bitwise(self, tmp_path, dtype):
        m = Model.create(TINY, seed=3, dtype=dtype)
        save_checkpoint(tmp_path / "a.ckpt", m, {"seed": 3})
        loaded, meta = load_checkpoint(tmp_path / "a.ckpt")
        assert meta["seed"] == 3 and meta["format_version"] == 1
        assert loaded.config == TINY
        for k in m.params:
            assert loaded.params[k].dtype == dtype
            np.testing.assert_array_equal(loaded.params[k], m.params[k])
        save_checkpoint(tmp_path / "b.ckpt", loaded, {"seed": 3})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_layout(self, tmp_path):
        m = Model.create(TINY, seed=0, dtype=np.float32)
        save_checkpoint(tmp_path / "a.ckpt", m)
        data = (tmp_path / "a.ckpt").read_bytes()
        assert data.startswith(CHECKPOINT_MAGIC)
        version, hlen = struct.unpack_from("<II", data, 8)
        n_params = sum(v.size for v in m.params.values())
        assert version == 1 and len(data) == 16 + hlen + 4 * n_params + 32
        first = np.frombuffer(data, "<f4", count=3, offset=16 + hlen)
        np.testing.assert_array_equal(first, m.params["conv0.w"].ravel()[:3])

    def test_corruption_detected(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", Model.create(TINY))
        data = bytearray((tmp_path / "a.ckpt").read_bytes())
        data[200] ^= 1
        (tmp_path / "a.ckpt").write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(tmp_path / "a.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello" * 20)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x")

    def test_architecture_mismatch_names_layer(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", Model.create(TINY))
        with pytest.raises(CheckpointError, match="layer conv0"):
            load_checkpoint(tmp_path / "a.ckpt", expected=ModelConfig(conv_filters=(5,), lstm_units=(4,)))

import math

import numpy as np
import pytest

from dctev import tensorkit as tk
from dctev.checks import MICRO
from dctev.dataio import WindowSet
from dctev.model import BaselineConfig, BaselineMLP, DctEv, loss_and_grads
from dctev.train import (
    TrainConfig,
    TrainingError,
    adam_step,
    init_adam_state,
    split_validation,
    train,
)


def separable_windows(n=400, T=12, M=3, seed=0, homes=2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, T))
    y = np.repeat((x[:, -4:].mean(axis=1) > 0)[:, None], M, axis=1).astype(float)
    home_ids = np.array([f"h{i % homes}" for i in range(n)], dtype=object)
    starts = np.arange(n) // homes
    return WindowSet(x, y, home_ids, starts, T, M)


def bce_double_loop(probs, labels):
    total = 0.0
    for i in range(probs.shape[0]):
        for m in range(probs.shape[1]):
            p = min(max(probs[i, m], 1e-12), 1 - 1e-12)
            y = labels[i, m]
            total -= y * math.log(p) + (1 - y) * math.log(1 - p)
    return total


class TestAdam:
    def test_first_step_is_signed_lr(self):
        cfg = TrainConfig(learning_rate=1e-3)
        p = {"w": np.array([1.0, -2.0, 0.5])}
        g = {"w": np.array([3.0, -0.2, 1e3])}
        new, _ = adam_step(p, g, init_adam_state(p), 1, cfg)
        np.testing.assert_allclose(new["w"] - p["w"], -1e-3 * np.sign(g["w"]), rtol=1e-6)

    def test_zero_gradient_is_noop(self):
        cfg = TrainConfig()
        p = {"w": np.arange(4.0)}
        new, state = adam_step(p, {"w": np.zeros(4)}, init_adam_state(p), 1, cfg)
        np.testing.assert_array_equal(new["w"], p["w"])
        assert not state["m"]["w"].any()

    def test_inputs_not_modified(self):
        p = {"w": np.ones(2)}
        st = init_adam_state(p)
        adam_step(p, {"w": np.ones(2)}, st, 1, TrainConfig())
        np.testing.assert_array_equal(p["w"], 1.0)
        assert not st["m"]["w"].any()

    def test_quadratic_matches_scalar_simulation(self):
        cfg = TrainConfig(learning_rate=0.1)
        p, st = {"w": np.array([1.0])}, init_adam_state({"w": np.zeros(1)})
        w, m, v = 1.0, 0.0, 0.0
        for t in range(1, 101):
            p, st = adam_step(p, {"w": 2 * p["w"]}, st, t, cfg)
            g = 2 * w
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p["w"][0] == pytest.approx(w, rel=1e-12, abs=1e-15)
        assert abs(p["w"][0]) < 0.1

    def test_shape_mismatch(self):
        p = {"w": np.ones(3)}
        with pytest.raises(tk.DimensionError):
            adam_step(p, {"w": np.ones(2)}, init_adam_state(p), 1, TrainConfig())

    def test_step_index_starts_at_one(self):
        p = {"w": np.ones(1)}
        with pytest.raises(ValueError):
            adam_step(p, p, init_adam_state(p), 0, TrainConfig())


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"batch_size": 0}, {"val_fraction": 0.5}, {"positive_class_weight": 0.5}, {"loss_reduction": "max"},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()


class TestLoss:
    def test_sum_mode_equals_double_loop(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            m = DctEv(MICRO, seed=seed)
            x = rng.standard_normal((7, 12))
            y = (rng.random((7, 3)) < 0.4).astype(float)
            loss, _ = loss_and_grads(m, x, y, reduction="sum", pos_weight=1.0)
            assert loss == pytest.approx(bce_double_loop(m.predict_proba(x), y), rel=1e-12)

    def test_mean_is_sum_over_count(self):
        m = DctEv(MICRO, seed=1)
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((5, 12)), (rng.random((5, 3)) < 0.5).astype(float)
        s, _ = loss_and_grads(m, x, y, "sum")
        a, _ = loss_and_grads(m, x, y, "mean")
        assert s == pytest.approx(15 * a, rel=1e-12)

    def test_pos_weight_scales_positive_terms(self):
        p = np.array([[0.3, 0.8]])
        y = np.array([[1.0, 0.0]])
        loss = tk.bce_loss(p, y, "sum", pos_weight=4.0).item()
        assert loss == pytest.approx(-4 * math.log(0.3) - math.log(0.2), rel=1e-12)

    def test_small_step_decreases_batch_loss(self):
        m = DctEv(MICRO, seed=2)
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal((32, 12)), (rng.random((32, 3)) < 0.3).astype(float)
        before, grads = loss_and_grads(m, x, y)
        new, _ = adam_step(m.params, grads, init_adam_state(m.params), 1, TrainConfig(learning_rate=1e-4))
        m.params = new
        after, _ = loss_and_grads(m, x, y)
        assert after < before


class TestValidationSplit:
    def test_tail_per_home(self):
        w = separable_windows(n=40, homes=2)
        fit, val = split_validation(w, 0.1)
        assert len(val) == 4
        for h in ("h0", "h1"):
            fit_starts = w.starts[fit][w.home_ids[fit] == h]
            val_starts = w.starts[val][w.home_ids[val] == h]
            assert fit_starts.max() < val_starts.min()

    def test_zero_fraction(self):
        fit, val = split_validation(separable_windows(n=10), 0.0)
        assert len(fit) == 10 and len(val) == 0


class TestTrain:
    def test_zero_epochs_returns_initial(self):
        m = DctEv(MICRO, seed=0)
        init = {k: v.copy() for k, v in m.params.items()}
        params, hist = train(m, separable_windows(), TrainConfig(epochs=0))
        assert hist.train_loss == [] and hist.val_f1 == []
        for k in init:
            np.testing.assert_array_equal(params[k], init[k])

    def test_deterministic(self):
        w = separable_windows()
        runs = []
        for _ in range(2):
            m = DctEv(MICRO, seed=5)
            params, hist = train(m, w, TrainConfig(epochs=2, batch_size=32))
            runs.append((params, hist))
        assert runs[0][1] == runs[1][1]
        for k in runs[0][0]:
            assert runs[0][0][k].tobytes() == runs[1][0][k].tobytes()

    def test_history_lengths(self):
        m = DctEv(MICRO, seed=0)
        _, hist = train(m, separable_windows(), TrainConfig(epochs=3, batch_size=64))
        assert len(hist.train_loss) == len(hist.val_loss) == len(hist.val_f1) == 3
        assert hist.best_epoch == int(np.argmax(hist.val_f1))

    @pytest.mark.parametrize("make", [lambda: DctEv(MICRO, seed=3), lambda: BaselineMLP(BaselineConfig(12, 16, 3), seed=3)])
    def test_separable_loss_halves(self, make):
        m = make()
        cfg = TrainConfig(epochs=15, batch_size=32, learning_rate=3e-3)
        _, hist = train(m, separable_windows(n=600), cfg)
        assert hist.train_loss[-1] < 0.5 * hist.initial_train_loss

    def test_empty_windows(self):
        with pytest.raises(TrainingError):
            train(DctEv(MICRO), WindowSet.empty(12, 3), TrainConfig())

    def test_shape_mismatch(self):
        with pytest.raises(tk.DimensionError):
            train(DctEv(MICRO), separable_windows(T=16), TrainConfig())

    def test_nan_loss_names_batch(self):
        w = separable_windows(n=64)
        w.inputs[5, 0] = np.nan
        with pytest.raises(TrainingError, match="batch"):
            train(DctEv(MICRO), w, TrainConfig(epochs=1, batch_size=16, val_fraction=0.0))

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from calibkit.calibrate import (CARING_DEFAULTS, Caring, FitConfig, Identity, ModelFormatError,
                                Temperature, caring_loss_and_grads, caring_temperature,
                                confidences_caring, confidences_identity, confidences_temperature,
                                fit_caring, fit_temperature, init_caring, load_model, nll_grad_tau,
                                save_model)
from calibkit.dataset import DataError, SampleSet
from calibkit.metrics import full_report
from calibkit.synth import SynthConfig, generate, generate_with_clusters
from oracles import caring_fd_gradients, caring_objective, nll_temperature, relative_error
from oracles import caring_temperature as oracle_temperature

FD_STEP = 1e-5


def random_caring(rng, d, h):
    return Caring(rng.normal(0, 0.7, (h, d)), rng.normal(0, 0.3, h),
                  rng.normal(0, 0.7, (1, h)), float(rng.uniform(0.3, 1.0)))


class TestConfidences:
    def test_identity(self):
        np.testing.assert_allclose(confidences_identity([[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-15)
        np.testing.assert_allclose(confidences_identity([[math.log(2), 0.0]]), [[2 / 3, 1 / 3]], atol=1e-15)
        np.testing.assert_allclose(confidences_identity([[5.0, 5.0, 5.0]]), [[1 / 3] * 3], atol=1e-15)

    def test_temperature(self):
        logits = np.random.default_rng(0).normal(0, 3, (20, 4))
        np.testing.assert_array_equal(confidences_temperature(logits, 1.0), confidences_identity(logits))
        e = math.e
        np.testing.assert_allclose(confidences_temperature([[2.0, 0.0]], 2.0), [[e / (1 + e), 1 / (1 + e)]], atol=1e-15)
        np.testing.assert_allclose(confidences_temperature([[2.0, 0.0]], 1e6), [[0.5, 0.5]], atol=1e-4)

    def test_tau_floor(self):
        with pytest.raises(ValueError):
            confidences_temperature([[1.0, 0.0]], 1e-4)

    def test_caring_temperature_special_cases(self):
        z = np.array([0.3, -2.0, 5.0])
        zero = Caring(np.zeros((4, 3)), np.zeros(4), np.zeros((1, 4)), 0.0)
        assert caring_temperature(z, zero) == 1.0
        assert caring_temperature(z, replace(zero, b2=0.5)) == 1.5
        assert caring_temperature(z, replace(zero, b2=-5.0)) == 1.0
        with pytest.raises(DataError):
            caring_temperature(np.zeros(2), zero)

    def test_caring_matches_oracle(self):
        rng = np.random.default_rng(3)
        model = random_caring(rng, 5, 7)
        for z in rng.normal(size=(20, 5)):
            expected = oracle_temperature(z.tolist(), model.w1.tolist(), model.b1.tolist(), model.w2[0].tolist(), model.b2)
            assert caring_temperature(z, model) == pytest.approx(expected, rel=1e-13)

    def test_caring_containment(self):
        rng = np.random.default_rng(1)
        logits, feats = rng.normal(0, 4, (30, 5)), rng.normal(size=(30, 6))
        zero = Caring(np.zeros((3, 6)), np.zeros(3), np.zeros((1, 3)), 0.0)
        assert np.max(np.abs(confidences_caring(logits, feats, zero) - confidences_identity(logits))) < 1e-12
        const = replace(zero, w1=rng.normal(size=(3, 6)), b2=0.8)
        diff = confidences_caring(logits, feats, const) - confidences_temperature(logits, 1.8)
        assert np.max(np.abs(diff)) < 1e-12

    def test_per_sample_temperatures(self):
        # hidden unit 0 reads feature 0 only
        w1 = np.zeros((2, 3))
        w1[0, 0] = 1.0
        model = Caring(w1, np.zeros(2), np.array([[1.0, 0.0]]), 0.0)
        feats = np.array([[0.5, 9.0, 9.0], [2.0, 9.0, 9.0]])
        temps = model.temperatures(np.zeros((2, 2)), feats)
        assert temps.tolist() == [1.5, 3.0]
        assert temps[0] == caring_temperature(feats[0], model)


class TestTemperatureGradient:
    def test_fd_at_one(self):
        rng = np.random.default_rng(0)
        logits, labels = rng.normal(0, 3, (40, 5)), rng.integers(0, 5, 40)
        _, grad = nll_grad_tau(logits, labels, 1.0)
        fd = (nll_temperature(logits.tolist(), labels.tolist(), 1 + FD_STEP)
              - nll_temperature(logits.tolist(), labels.tolist(), 1 - FD_STEP)) / (2 * FD_STEP)
        assert relative_error(grad, fd) < 1e-4

    def test_loss_matches_oracle(self):
        rng = np.random.default_rng(2)
        logits, labels = rng.normal(0, 3, (25, 3)), rng.integers(0, 3, 25)
        loss, _ = nll_grad_tau(logits, labels, 1.7)
        assert loss == pytest.approx(nll_temperature(logits.tolist(), labels.tolist(), 1.7), rel=1e-13)

    def test_flat_rows(self):
        logits = np.tile(np.array([[1.5], [-2.0], [0.0]]), (1, 4))
        assert nll_grad_tau(logits, np.array([0, 3, 2]), 1.3)[1] == 0.0

    def test_sign(self):
        logits, labels = np.array([[2.0, 0.0]]), np.array([0])
        assert nll_temperature(logits.tolist(), [0], 0.5) < nll_temperature(logits.tolist(), [0], 2.0)
        assert nll_grad_tau(logits, labels, 1.0)[1] > 0


class TestCaringGradient:
    @pytest.mark.parametrize("wd", [0.0, 1e-2])
    def test_fd_random_init(self, wd):
        rng = np.random.default_rng(7)
        logits, feats, labels = rng.normal(0, 3, (10, 4)), rng.normal(size=(10, 5)), rng.integers(0, 4, 10)
        model = init_caring(5, 6, seed=11)
        model = replace(model, b1=rng.normal(0, 0.1, 6), b2=0.2)
        _, grads = caring_loss_and_grads(model, logits, feats, labels, wd)
        fd = caring_fd_gradients(model, logits, feats, labels, wd, FD_STEP)
        for name in fd:
            assert relative_error(grads[name], fd[name]) < 1e-4, name

    def test_loss_matches_oracle(self):
        rng = np.random.default_rng(5)
        model = random_caring(rng, 3, 4)
        logits, feats, labels = rng.normal(0, 3, (12, 3)), rng.normal(size=(12, 3)), rng.integers(0, 3, 12)
        loss, _ = caring_loss_and_grads(model, logits, feats, labels, 1e-3)
        expected = caring_objective(logits.tolist(), feats.tolist(), labels.tolist(), model.w1.tolist(),
                                    model.b1.tolist(), model.w2[0].tolist(), model.b2, 1e-3)
        assert loss == pytest.approx(expected, rel=1e-12)


class TestFitTemperature:
    def test_calibrated_set_stays_near_one(self):
        val, _ = generate(SynthConfig(n_val=4000, n_test=5, sharpness=(1.0,), margin=(2.0,), seed=21))
        model, _ = fit_temperature(val, FitConfig(lr=1.0, epochs=100))
        assert 0.9 <= model.tau <= 1.1

    def test_recovers_sharpness(self):
        val, _ = generate(SynthConfig(n_val=4000, n_test=5, sharpness=(3.0,), margin=(2.0,), seed=22))
        model, _ = fit_temperature(val, FitConfig(lr=1.0, epochs=100))
        assert 2.25 <= model.tau <= 3.75

    def test_default_budget_moves_towards_target(self):
        val, _ = generate(SynthConfig(n_val=2000, n_test=5, sharpness=(3.0,), margin=(2.0,), seed=22))
        model, trace = fit_temperature(val)
        assert len(trace) == 50
        assert 1.0 < model.tau < 3.0
        assert trace[-1].train_nll < trace[0].train_nll

    def test_one_epoch_is_one_step(self):
        val, _ = generate(SynthConfig(n_val=300, n_test=5, seed=1))
        _, grad = nll_grad_tau(val.logits, val.labels, 1.0)
        model, trace = fit_temperature(val, FitConfig(lr=0.01, epochs=1))
        assert model.tau == 1.0 - 0.01 * grad
        assert len(trace) == 1 and trace[0].std_T == 0.0 and trace[0].mean_T == model.tau

    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            FitConfig(epochs=0)

    def test_projection(self):
        # labels always on the smallest logit push tau up; labels on the largest with
        # a huge step push tau to the floor
        logits = np.array([[3.0, 0.0]] * 10)
        model, _ = fit_temperature(SampleSet(logits, np.zeros(10, dtype=int)), FitConfig(lr=1e6, epochs=1))
        assert model.tau == 1e-3


class TestFitCaring:
    def test_requires_features(self):
        val, _ = generate(SynthConfig(n_val=50, n_test=5, seed=1))
        with pytest.raises(DataError, match="features required"):
            fit_caring(SampleSet(val.logits, val.labels), replace(CARING_DEFAULTS, epochs=2))

    def test_hidden_validated(self):
        with pytest.raises(ValueError):
            FitConfig(hidden=0)

    def test_logits_frozen(self):
        val, _ = generate(SynthConfig(n_val=200, n_test=5, seed=2))
        before = val.logits.copy()
        fit_caring(val, replace(CARING_DEFAULTS, epochs=5))
        np.testing.assert_array_equal(val.logits, before)

    def test_init_near_identity(self):
        model = init_caring(8, 64, seed=0)
        assert np.all(np.abs(model.w1) < 1 / math.sqrt(8))
        assert np.all((model.w2 >= 0) & (model.w2 < 1 / 8))
        assert np.all(model.b1 == 0) and model.b2 == 0

    def test_homogeneous_collapses_to_global(self):
        val, _ = generate(SynthConfig(n_val=3000, n_test=5, sharpness=(3.0,), margin=(2.0,), seed=5))
        _, trace = fit_caring(val)
        assert trace[-1].std_T < trace[-1].mean_T / 10

    def test_heteroscedastic_spreads(self):
        cfg = SynthConfig(n_val=3000, n_test=5, clusters=2, sharpness=(1.5, 4.0), margin=(2.0, 2.0), seed=6)
        (val, clusters), _ = generate_with_clusters(cfg)
        model, trace = fit_caring(val)
        temps = model.temperatures(val.logits, val.features)
        assert trace[-1].std_T > 0.1
        assert temps[clusters == 0].mean() < temps[clusters == 1].mean()
        assert trace[-1].std_T > trace[0].std_T

    def test_minibatch_deterministic(self):
        val, _ = generate(SynthConfig(n_val=300, n_test=5, clusters=2, sharpness=(1.5, 4.0), margin=(2.0, 2.0), seed=3))
        cfg = replace(CARING_DEFAULTS, epochs=20, batch_size=64, seed=4)
        a, _ = fit_caring(val, cfg)
        b, _ = fit_caring(val, cfg)
        full, _ = fit_caring(val, replace(cfg, batch_size=0))
        assert a.w1.tobytes() == b.w1.tobytes() and a.b2 == b.b2
        assert a.w1.tobytes() != full.w1.tobytes()

    def test_deterministic(self):
        val, _ = generate(SynthConfig(n_val=300, n_test=5, seed=3))
        cfg = replace(CARING_DEFAULTS, epochs=30, seed=9)
        a, ta = fit_caring(val, cfg)
        b, tb = fit_caring(val, cfg)
        for name in ("w1", "b1", "w2"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
        assert a.b2 == b.b2 and ta.records == tb.records


class TestInvariants:
    def _models(self, d):
        rng = np.random.default_rng(0)
        return [Identity(), Temperature(0.4), Temperature(2.7), random_caring(rng, d, 5), init_caring(d, 16, 1)]

    def test_argmax_and_ranking(self):
        val, test = generate(SynthConfig(n_val=500, n_test=500, clusters=2, sharpness=(1.5, 4.0), margin=(2.0, 1.0), seed=8))
        for s in (val, test):
            raw = full_report(s, Identity()).accuracy
            order = np.argsort(-s.logits, axis=1, kind="stable")
            for model in self._models(s.feature_dim):
                logp = model.log_probs(s.logits, s.features)
                assert np.array_equal(np.argmax(logp, axis=1), np.argmax(s.logits, axis=1))
                assert np.array_equal(np.argsort(-logp, axis=1, kind="stable"), order)
                assert full_report(s, model).accuracy == raw

    def test_temperature_monotone(self):
        rng = np.random.default_rng(4)
        taus = np.linspace(1, 20, 60)
        for row in rng.normal(0, 5, (30, 6)):
            conf = [confidences_temperature([row], t).max() for t in taus]
            assert all(b <= a + 1e-15 for a, b in zip(conf, conf[1:]))

    def test_tau_limit(self):
        rng = np.random.default_rng(5)
        logits = rng.uniform(-50, 50, (200, 7))
        assert np.max(np.abs(confidences_temperature(logits, 1e6) - 1 / 7)) < 1e-4

    def test_temperature_floor_always(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            model = Caring(rng.normal(0, 3, (6, 4)), rng.normal(0, 3, 6), rng.normal(0, 3, (1, 6)), float(rng.normal(0, 3)))
            assert np.all(model.temperatures(np.zeros((50, 2)), rng.normal(0, 5, (50, 4))) >= 1.0)


class TestPersistence:
    def test_temperature_roundtrip(self, tmp_path):
        save_model(Temperature(1.37), tmp_path / "t.json")
        assert load_model(tmp_path / "t.json").tau == 1.37

    def test_caring_roundtrip(self, tmp_path):
        val, _ = generate(SynthConfig(n_val=200, n_test=5, seed=3))
        model, _ = fit_caring(val, replace(CARING_DEFAULTS, epochs=10))
        save_model(model, tmp_path / "c.json")
        loaded = load_model(tmp_path / "c.json")
        for name in ("w1", "b1", "w2"):
            assert getattr(loaded, name).tobytes() == getattr(model, name).tobytes()
        assert loaded.b2 == model.b2
        d = json.loads((tmp_path / "c.json").read_text())
        assert d["kind"] == "caring" and d["hidden"] == 64 and d["input_dim"] == 8
        assert len(d["w1"]) == 64 * 8

    def test_unknown_kind(self, tmp_path):
        (tmp_path / "m.json").write_text('{"kind": "unknown"}')
        with pytest.raises(ModelFormatError, match="unknown"):
            load_model(tmp_path / "m.json")

    def test_shape_mismatch(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps(
            {"kind": "caring", "hidden": 2, "input_dim": 3, "w1": [0.0] * 5, "b1": [0, 0], "w2": [0, 0], "b2": 0}))
        with pytest.raises(ModelFormatError, match="shape mismatch"):
            load_model(tmp_path / "m.json")

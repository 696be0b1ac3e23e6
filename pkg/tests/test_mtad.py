import math

import numpy as np
import pytest

from rarelife.errors import ConfigError, DataError, NumericalError
from rarelife.evaluation import build_split_data, make_splits, prepare_cohort, window_index
from rarelife.mtad import (
    Batch,
    MtadConfig,
    MtadModel,
    ScoreTable,
    ThresholdSet,
    anomaly_score,
    decide,
    detect,
    fit_thresholds,
    predictor_only_decisions,
    predictor_only_detect,
    rescale,
    scaling_factor,
    score_windows,
    thresholds_from_scores,
    train,
    transition_vector,
)
from rarelife.synthetic import CohortConfig, generate_cohort
from rarelife.timeseries import PerfLabel, WindowSet


def random_windows(rng, n=40, l=4, m=3, rare=None, users=None):
    return WindowSet(
        rng.normal(size=(n, l, m)),
        rng.integers(0, 8, size=(n, l)),
        np.zeros(n, dtype=int) if rare is None else rare,
        np.array(users if users is not None else ["a"] * n, dtype=object),
        np.arange(n),
    )


@pytest.fixture(scope="module")
def small_split():
    cohort, _ = generate_cohort(CohortConfig(n_users=20, seed=5))
    prepared = prepare_cohort(cohort)
    spec = make_splits(window_index(prepared, 10), seed=0)
    return build_split_data(prepared, spec, 10)


@pytest.fixture(scope="module")
def trained_small(small_split):
    cfg = MtadConfig(hidden=16, epochs=40, lr=1e-3, dtype="float32", seed=0)
    model, report = train(MtadModel(cfg), small_split.train, small_split.val)
    return model, report


class TestArchitecture:
    def test_shapes(self):
        model = MtadModel(MtadConfig(hidden=100))
        assert model.params["encoder.Wx"].shape == (29, 400)
        assert model.params["decoder.Wx"].shape == (100, 400)
        assert model.params["decoder_head.W"].shape == (100, 29)
        assert model.params["predictor_head.W"].shape == (100, 8)
        X_hat, probs = model.predict(np.zeros((2, 10, 29)))
        assert X_hat.shape == (2, 10, 29) and probs.shape == (2, 10, 8)

    def test_reconstruction_only_has_no_predictor(self):
        model = MtadModel(MtadConfig(hidden=8, use_predictor=False))
        assert not any(k.startswith("predictor") for k in model.params)
        assert model.predict(np.zeros((1, 10, 29)))[1] is None

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            MtadConfig(window=1)
        with pytest.raises(ConfigError):
            MtadConfig(dtype="float16")


class TestAnomalyScore:
    def test_only_last_row_counts(self, rng):
        W = rng.normal(size=(10, 29))
        W_hat = rng.normal(size=(10, 29))
        W_hat[-1] = W[-1]
        assert anomaly_score(W, W_hat) == 0.0

    def test_arithmetic(self):
        assert anomaly_score([[9, 9], [2, 0]], [[0, 0], [0, 0]]) == 2.0

    def test_oracle(self, rng):
        W, V = rng.normal(size=(10, 29)), rng.normal(size=(10, 29))
        assert anomaly_score(W, V) == pytest.approx(sum((W[-1, j] - V[-1, j]) ** 2 for j in range(29)) / 29, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            anomaly_score(np.zeros((3, 2)), np.zeros((3, 3)))


class TestTransitions:
    def test_single_change(self):
        y = [PerfLabel.UNKNOWN, PerfLabel.UNKNOWN, PerfLabel.LARGE_NEG]
        assert transition_vector(y).tolist() == [0, 1]

    def test_constant(self):
        assert transition_vector([3] * 10).tolist() == [0] * 9

    def test_alternating(self):
        assert transition_vector([1, 2, 1, 2]).tolist() == [1, 1, 1]

    def test_needs_two_days(self):
        with pytest.raises(ValueError):
            transition_vector([1])


class TestScalingFactor:
    def test_zero_vector(self):
        assert scaling_factor(np.zeros(9)) == 1.0

    def test_worked_examples(self):
        assert scaling_factor([0, 1], 2.0) == pytest.approx((1 + math.exp(-4)) / 2, abs=1e-15)
        assert scaling_factor([0, 1], 2.0) == pytest.approx(0.50916, abs=1e-5)
        assert scaling_factor([1], 0.5) == pytest.approx(0.60653, abs=1e-5)

    def test_recency(self):
        s = [scaling_factor(np.eye(9)[k], 2.0) for k in range(9)]
        assert all(a > b for a, b in zip(s, s[1:]))

    def test_flipping_bits_never_increases(self, rng):
        r = np.zeros(9, dtype=int)
        prev = scaling_factor(r)
        for k in rng.permutation(9):
            r[k] = 1
            cur = scaling_factor(r)
            assert cur <= prev
            prev = cur

    def test_single_transition_bound(self):
        worst = min(scaling_factor(np.eye(9)[k], 10.0) for k in range(9))
        assert 1 / worst <= 9 / 8 + 1e-12

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            scaling_factor([1], 0.0)


class TestThresholds:
    def test_linear_interpolation(self):
        ts = thresholds_from_scores(np.arange(1.0, 101.0), np.array(["u"] * 100))
        assert ts.gamma == pytest.approx(95.05)

    def test_all_equal(self):
        assert thresholds_from_scores(np.full(30, 0.7), np.array(["u"] * 30)).gamma == pytest.approx(0.7)

    def test_per_user_and_fallback(self, rng):
        users = np.array(["a"] * 100 + ["b"] * 100 + ["c"] * 5, dtype=object)
        values = np.concatenate([rng.random(100), 10 + rng.random(100), rng.random(5)])
        ts = thresholds_from_scores(values, users, per_user=True)
        assert set(ts.per_user) == {"a", "b"} and ts.fallback_users == ["c"]
        for u in ("a", "b"):
            frac = np.mean(values[users == u] > ts.per_user[u])
            assert frac == pytest.approx(0.05, abs=0.011)
        assert ts.for_user("c", True) == ts.gamma
        assert ts.for_user("a", False) == ts.gamma

    @pytest.mark.parametrize("n,above", [(20, 1), (21, 1), (25, 2), (30, 2), (40, 2), (45, 3)])
    def test_small_sample_exceedance_is_discrete(self, rng, n, above):
        """With n distinct scores exactly n-1-floor(0.95(n-1)) lie above gamma."""
        values = rng.permutation(n).astype(float)
        ts = thresholds_from_scores(values, np.array(["u"] * n), per_user=True)
        assert int(np.sum(values > ts.per_user["u"])) == above == n - 1 - int(np.floor(0.95 * (n - 1)))

    def test_empty(self):
        with pytest.raises(DataError):
            thresholds_from_scores(np.array([]), np.array([]))

    def test_strict_inequality(self):
        scores = ScoreTable(np.array([1.0, 2.0]), None, np.zeros((2, 1), dtype=int), np.ones(2), np.array([1.0, 2.0]))
        decisions, gammas = decide(scores, np.array(["u", "u"]), ThresholdSet(1.0))
        assert decisions.tolist() == [0, 1] and gammas.tolist() == [1.0, 1.0]


class TestPredictorOnly:
    def test_decisions(self):
        y = np.array([[0, 0, 4, 4], [0, 0, 0, 1]])
        assert predictor_only_decisions(y).tolist() == [0, 1]

    def test_requires_predictor(self, rng):
        model = MtadModel(MtadConfig(window=4, n_features=3, hidden=4, use_predictor=False))
        with pytest.raises(ConfigError):
            predictor_only_detect(model, random_windows(rng))


class TestScoring:
    def test_score_algebra(self, rng):
        model = MtadModel(MtadConfig(window=4, n_features=3, hidden=6, seed=2))
        scores = score_windows(model, random_windows(rng, n=300))
        np.testing.assert_allclose(scores.delta, scores.alpha / scores.s, rtol=1e-12)
        assert np.all((scores.s > 0) & (scores.s <= 1))
        zero = scores.r.sum(axis=1) == 0
        np.testing.assert_array_equal(scores.delta[zero], scores.alpha[zero])
        assert np.all(scores.delta[~zero] > scores.alpha[~zero])

    def test_rescale_keeps_r_zero_windows(self, rng):
        model = MtadModel(MtadConfig(window=4, n_features=3, hidden=6, seed=2))
        scores = score_windows(model, random_windows(rng, n=200))
        zero = scores.r.sum(axis=1) == 0
        for lam in (0.5, 5.0, 10.0):
            np.testing.assert_array_equal(rescale(scores, lam).delta[zero], scores.delta[zero])

    def test_order_invariance(self, rng):
        model = MtadModel(MtadConfig(window=4, n_features=3, hidden=6, seed=2))
        ws = random_windows(rng, n=50)
        ts = ThresholdSet(0.5)
        base = [o.decision for o in detect(model, ws, ts)]
        perm = rng.permutation(50)
        shuffled = [o.decision for o in detect(model, ws.subset(perm), ts)]
        assert [base[k] for k in perm] == shuffled

    def test_argmax_ties_go_to_lowest_class(self):
        model = MtadModel(MtadConfig(window=3, n_features=2, hidden=4, seed=0))
        for k in ("predictor_head.W", "predictor_head.b"):
            model.params[k][...] = 0.0
        scores = score_windows(model, random_windows(np.random.default_rng(0), n=3, l=3, m=2))
        assert np.all(scores.y_hat == 0)


class TestTraining:
    def test_rejects_rare_windows(self, rng):
        rare = np.zeros(40, dtype=int)
        rare[3] = 1
        model = MtadModel(MtadConfig(window=4, n_features=3, hidden=4))
        with pytest.raises(DataError, match="rare"):
            train(model, random_windows(rng, rare=rare), random_windows(rng))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self, rng):
        model = MtadModel(MtadConfig(window=4, n_features=3, hidden=4, lr=1e30, epochs=5, dtype="float32"))
        with pytest.raises(NumericalError, match="diverged"):
            train(model, random_windows(rng), random_windows(rng))

    def test_rejects_non_finite_input(self, rng):
        ws = random_windows(rng)
        ws.X[0, 0, 0] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            train(MtadModel(MtadConfig(window=4, n_features=3, hidden=4)), ws, random_windows(rng))

    def test_window_mismatch(self, rng):
        model = MtadModel(MtadConfig(window=5, n_features=3, hidden=4))
        with pytest.raises(ConfigError):
            train(model, random_windows(rng), random_windows(rng))

    def test_loss_halves(self, trained_small):
        _, report = trained_small
        assert report.train_loss[-1] <= 0.5 * report.initial_train_loss

    def test_report_consistency(self, trained_small):
        _, report = trained_small
        n = report.epochs_run
        assert len(report.val_loss) == len(report.train_loss_a) == len(report.val_loss_b) == n
        assert report.stop_reason in ("max_epochs", "patience", "val_floor")
        np.testing.assert_allclose(np.array(report.val_loss_a) + report.val_loss_b, report.val_loss, rtol=1e-6)

    def test_patience_contract(self, trained_small):
        _, report = trained_small
        v = report.val_loss
        for k in range(len(v) - 10):
            assert min(v[k + 1 : k + 11]) < min(v[: k + 1]) or k + 10 >= len(v) - 1

    def test_patience_stop(self, small_split):
        cfg = MtadConfig(hidden=4, epochs=200, lr=0.5, patience=2, dtype="float32", seed=1)
        _, report = train(MtadModel(cfg), small_split.train.subset(slice(0, 256)), small_split.val)
        assert report.stop_reason == "patience"
        assert report.epochs_run - 1 - report.best_epoch == 2

    def test_val_floor_stop(self, small_split):
        cfg = MtadConfig(hidden=4, epochs=5, val_floor=1e9, dtype="float32")
        _, report = train(MtadModel(cfg), small_split.train.subset(slice(0, 128)), small_split.val)
        assert report.stop_reason == "val_floor" and report.epochs_run == 1

    def test_deterministic(self, small_split):
        cfg = MtadConfig(hidden=4, epochs=3, dtype="float64", seed=9)
        a = train(MtadModel(cfg), small_split.train.subset(slice(0, 300)), small_split.val)
        b = train(MtadModel(cfg), small_split.train.subset(slice(0, 300)), small_split.val)
        assert a[1].train_loss == b[1].train_loss and a[1].val_loss == b[1].val_loss
        for k in a[0].params:
            np.testing.assert_array_equal(a[0].params[k], b[0].params[k])

    def test_best_weights_restored(self, trained_small, small_split):
        model, report = trained_small
        labels = small_split.val.perf
        from rarelife.nn import class_weights

        w = class_weights(small_split.train.perf, 8)
        val = model.loss(Batch(small_split.val.X, labels, w))
        assert val == pytest.approx(min(report.val_loss), rel=1e-4)


class TestDetection:
    def test_rare_window_with_transition_is_boosted(self, trained_small, small_split):
        model, _ = trained_small
        ts = fit_thresholds(model, small_split.val)
        out = detect(model, small_split.test, ts)
        boosted = [o for o in out if o.true_label == 1 and any(o.r)]
        assert boosted, "no rare window received a predicted transition"
        for o in boosted:
            assert o.delta > o.alpha and o.decision == int(o.delta > o.gamma_used)

    def test_fit_thresholds_validates(self, trained_small, small_split):
        model, _ = trained_small
        with pytest.raises(ConfigError):
            fit_thresholds(model, small_split.val, statistic="beta")
        bad = small_split.test
        with pytest.raises(DataError):
            fit_thresholds(model, bad)

    def test_global_calibration(self, trained_small, small_split):
        model, _ = trained_small
        ts = fit_thresholds(model, small_split.val)
        delta = score_windows(model, small_split.val).delta
        assert np.mean(delta > ts.gamma) == pytest.approx(0.05, abs=0.015)

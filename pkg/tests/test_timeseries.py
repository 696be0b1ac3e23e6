import numpy as np
import pytest

from conftest import make_series
from rarelife.errors import DataError
from rarelife.timeseries import (
    FEATURES,
    MISSING,
    N_CLASSES,
    PERF_NAMES,
    EventMeta,
    FeatureSchema,
    PerfLabel,
    WindowSet,
    audit_event_spans,
    denormalize,
    forward_fill_labels,
    impute_mean,
    make_windows,
    normalize_within_subject,
    perf_code,
    preprocess,
    read_cohort_csv,
    window_set,
    write_cohort_csv,
)


class TestSchema:
    def test_default_has_29_unique_features(self):
        assert len(FEATURES) == 29
        assert len(set(FEATURES.names)) == 29

    def test_every_epoch_feature_has_four_epochs(self):
        bases = {}
        for name, ep in zip(FEATURES.names, FEATURES.epochs):
            if ep is not None:
                bases.setdefault(name.rsplit("_ep_", 1)[0], set()).add(ep)
        assert bases and all(eps == {1, 2, 3, 4} for eps in bases.values())

    def test_rejects_duplicates(self):
        names = list(FEATURES.names)
        names[1] = names[0]
        with pytest.raises(ValueError):
            FeatureSchema(tuple(names), FEATURES.epochs)

    def test_perf_classes(self):
        assert N_CLASSES == 8
        assert PERF_NAMES[PerfLabel.UNKNOWN] == "Unknown"
        assert perf_code("LargePos") == PerfLabel.LARGE_POS
        with pytest.raises(ValueError):
            perf_code("Huge")


class TestImputeMean:
    def test_fills_with_observed_mean(self):
        s = impute_mean(make_series([1.0, np.nan, 3.0]))
        np.testing.assert_allclose(s.features[:, 0], [1, 2, 3])
        assert s.mask[:, 0].tolist() == [True, False, True]

    def test_fully_observed_is_unchanged(self):
        X = np.arange(6.0).reshape(3, 2)
        s = impute_mean(make_series(X))
        np.testing.assert_array_equal(s.features, X)

    def test_gap_in_days_is_filled(self):
        s = impute_mean(make_series([1.0, 2.0, 6.0], day_index=[0, 1, 3]))
        assert s.day_index.tolist() == [0, 1, 2, 3]
        assert not s.mask[2].any()
        assert s.features[2, 0] == pytest.approx(3.0)
        assert s.T - 3 == 1

    def test_feature_without_observations_is_named(self):
        X = np.array([[1.0, np.nan], [2.0, np.nan]])
        with pytest.raises(DataError, match="no observed values"):
            impute_mean(make_series(X))

    def test_error_names_schema_feature(self, full_series):
        s = full_series.copy()
        s.mask[:, 3] = False
        with pytest.raises(DataError, match=FEATURES.names[3]):
            impute_mean(s)


class TestNormalize:
    def test_population_std(self):
        s = normalize_within_subject(make_series([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(s.features[:, 0], [-1.224744871391589, 0, 1.224744871391589], atol=1e-12)

    def test_constant_column_maps_to_zero(self):
        s = normalize_within_subject(make_series([5.0, 5.0, 5.0]))
        np.testing.assert_array_equal(s.features[:, 0], 0.0)

    def test_stats_from_fit_days_only(self):
        s = normalize_within_subject(make_series([1.0, 3.0, 100.0]), fit_days=[0, 1])
        mean, scale = s.norm_stats
        assert mean[0] == 2.0 and scale[0] == 1.0
        assert s.features[2, 0] == 98.0

    def test_empty_fit_set(self):
        with pytest.raises(DataError):
            normalize_within_subject(make_series([1.0, 2.0]), fit_days=[7])

    def test_round_trip(self, full_series):
        s = impute_mean(full_series)
        n = normalize_within_subject(s, fit_days=range(30))
        np.testing.assert_allclose(denormalize(n), s.features, atol=1e-9)


class TestForwardFill:
    def test_single_event(self):
        s = make_series(np.zeros(5), rare=[MISSING, MISSING, 1, MISSING, MISSING], perf=[MISSING, MISSING, 1, MISSING, MISSING])
        out = forward_fill_labels(s)
        assert [PERF_NAMES[p] for p in out.perf_label] == ["Unknown", "Unknown", "LargeNeg", "LargeNeg", "LargeNeg"]
        assert out.rare_label.tolist() == [0, 0, 1, 0, 0]

    def test_no_events_all_unknown(self):
        out = forward_fill_labels(make_series(np.zeros(4)))
        assert (out.perf_label == PerfLabel.UNKNOWN).all()
        assert (out.rare_label == 0).all()

    def test_two_events(self):
        rare = np.full(9, MISSING)
        perf = np.full(9, MISSING)
        rare[[3, 6]] = 1
        perf[3], perf[6] = PerfLabel.MED_POS, PerfLabel.SMALL_NEG
        out = forward_fill_labels(make_series(np.zeros(9), rare=rare, perf=perf))
        assert (out.perf_label[:3] == PerfLabel.UNKNOWN).all()
        assert (out.perf_label[3:6] == PerfLabel.MED_POS).all()
        assert (out.perf_label[6:] == PerfLabel.SMALL_NEG).all()

    def test_missing_rare_label_on_event_day(self):
        s = make_series(np.zeros(3), events={1: EventMeta("health", "negative")})
        assert forward_fill_labels(s).rare_label.tolist() == [0, 1, 0]

    def test_idempotent(self, full_series):
        once = forward_fill_labels(full_series)
        twice = forward_fill_labels(once)
        np.testing.assert_array_equal(once.perf_label, twice.perf_label)
        np.testing.assert_array_equal(once.rare_label, twice.rare_label)


class TestWindows:
    def test_count(self):
        ws = make_windows(preprocess(make_series(np.arange(12.0))), 10)
        assert len(ws) == 3
        assert [w.t for w in ws] == [9, 10, 11]

    def test_boundary(self):
        assert len(make_windows(make_series(np.arange(10.0)), 10)) == 1

    def test_short_series_warns(self, caplog):
        ws = window_set(make_series(np.arange(5.0)), 10)
        assert len(ws) == 0
        assert "no windows" in caplog.text

    def test_early_event_is_never_a_window_label(self):
        rare = np.zeros(20, dtype=int)
        rare[4] = 1
        s = forward_fill_labels(make_series(np.arange(20.0), rare=rare))
        ws = window_set(s, 10)
        assert ws.rare.sum() == 0
        assert np.any(ws.X == 4.0)

    def test_rows_and_labels(self, full_series):
        s = preprocess(full_series)
        ws = window_set(s, 10)
        k = 25 - 9
        np.testing.assert_array_equal(ws.X[k], s.features[16:26])
        np.testing.assert_array_equal(ws.perf[k], s.perf_label[16:26])
        assert ws.rare[k] == 1 and ws.rare.sum() == 1

    @pytest.mark.parametrize("l", [6, 8, 10, 12])
    def test_count_per_length(self, full_series, l):
        s = preprocess(full_series)
        assert len(window_set(s, l)) == s.T - l + 1

    def test_round_trip_through_window_objects(self, full_series):
        ws = window_set(preprocess(full_series), 6)
        back = WindowSet.from_windows(ws.to_windows())
        np.testing.assert_array_equal(back.X, ws.X)
        np.testing.assert_array_equal(back.t, ws.t)


class TestAudit:
    def test_passes_when_observed(self, full_series):
        assert audit_event_spans(impute_mean(full_series)) == {25: 0.0}

    def test_flags_heavily_imputed_span(self, full_series):
        s = full_series.copy()
        s.mask[10:30] = False
        s.features[10:30] = np.nan
        with pytest.raises(DataError, match="imputed"):
            audit_event_spans(impute_mean(s))


class TestCsv:
    def test_round_trip(self, tmp_path, full_series):
        s = full_series.copy()
        s.features[3, 2] = np.nan
        s.mask[3, 2] = False
        path = tmp_path / "c.csv"
        write_cohort_csv([s], path)
        (back,) = read_cohort_csv(path)
        assert back.user_id == s.user_id
        np.testing.assert_array_equal(back.mask, s.mask)
        np.testing.assert_allclose(back.features[s.mask], s.features[s.mask], rtol=1e-9)
        np.testing.assert_array_equal(back.rare_label, s.rare_label)
        np.testing.assert_array_equal(back.perf_label, s.perf_label)
        assert back.events == s.events

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("user_id,day_index\nu,0\n")
        with pytest.raises(DataError, match="missing columns"):
            read_cohort_csv(path)

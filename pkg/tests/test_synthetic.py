import hashlib

import numpy as np
import pytest

from rarelife.errors import ConfigError
from rarelife.synthetic import (
    SHIFTLESS_TYPES,
    TYPE_TOTALS,
    CohortConfig,
    cohort_stats,
    effect_curve,
    generate_cohort,
    generate_user,
    inject_missingness,
    label_signatures,
    make_profile,
    metadata,
    user_rng,
)
from rarelife.timeseries import FEATURES, PerfLabel, forward_fill_labels, write_cohort_csv


@pytest.fixture(scope="module")
def reference():
    return generate_cohort(CohortConfig())


def digest(cohort, tmp_path, name):
    path = tmp_path / name
    write_cohort_csv(cohort, path)
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestConfig:
    def test_defaults_follow_reported_mix(self):
        cfg = CohortConfig()
        total = sum(TYPE_TOTALS.values())
        assert cfg.event_type_mix["personal"] == pytest.approx(92 / total)
        assert cfg.valence_mix["positive"] == pytest.approx(136 / 198)
        assert cfg.target_anomaly_ratio == 0.019

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"target_anomaly_ratio": 0.06},
            {"target_anomaly_ratio": 0.0},
            {"miss_prob": 0.25},
            {"ar_coefficient": 1.0},
            {"event_type_mix": {"personal": 0.5, "work": 0.4}},
            {"event_type_mix": {"hobby": 1.0}},
            {"valence_mix": {"positive": 1.0}},
            {"affected_features": ("nope",)},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            CohortConfig(**kwargs)


class TestGenerateCohort:
    def test_deterministic(self, tmp_path):
        cfg = CohortConfig(n_users=8, seed=7)
        assert digest(generate_cohort(cfg)[0], tmp_path, "a.csv") == digest(generate_cohort(cfg)[0], tmp_path, "b.csv")

    def test_seed_changes_output(self, tmp_path):
        a = generate_cohort(CohortConfig(n_users=4, seed=1))[0]
        b = generate_cohort(CohortConfig(n_users=4, seed=2))[0]
        assert digest(a, tmp_path, "a.csv") != digest(b, tmp_path, "b.csv")

    def test_users_are_independent_substreams(self):
        small = generate_cohort(CohortConfig(n_users=3, seed=11))[0]
        large = generate_cohort(CohortConfig(n_users=6, seed=11))[0]
        for a, b in zip(small, large):
            np.testing.assert_array_equal(a.features, b.features)

    def test_reference_shape(self, reference):
        cohort, events = reference
        stats = cohort_stats(cohort, events)
        assert stats["n_users"] == 126
        assert 0.014 <= stats["anomaly_ratio"] <= 0.024
        assert abs(stats["anomaly_ratio"] - 0.019) <= 0.005
        assert all(75 <= s.T <= 85 for s in cohort)

    def test_event_days_and_gaps(self, reference):
        cohort, events = reference
        by_user = {}
        for e in events:
            by_user.setdefault(e.user_id, []).append(e.day_index)
        for s in cohort:
            days = by_user.get(s.user_id, [])
            assert sorted(s.event_days()) == sorted(days)
            assert all(b - a >= 60 for a, b in zip(days, days[1:]))
            assert set(s.events) == set(days)

    def test_labels_follow_forward_fill(self, reference):
        for s in reference[0][:30]:
            ff = forward_fill_labels(s)
            np.testing.assert_array_equal(ff.perf_label, s.perf_label)
            days = s.event_days()
            if days:
                assert np.all(s.perf_label[: days[0]] == PerfLabel.UNKNOWN)
            else:
                assert np.all(s.perf_label == PerfLabel.UNKNOWN)

    def test_infeasible_placement(self):
        with pytest.raises(ConfigError, match="fits at most"):
            generate_cohort(CohortConfig(n_users=2, days_per_user=(20, 20), target_anomaly_ratio=0.05, lead_days=12, tail_days=8))

    def test_shift_size(self, reference):
        """First-5-day shift of affected features exceeds one pre-event sd on average."""
        cohort, events = reference
        series = {s.user_id: s for s in cohort}
        ratios = []
        for e in events:
            if e.profile.type in SHIFTLESS_TYPES or e.day_index < 12:
                continue
            s = series[e.user_id]
            d = e.day_index
            for j in e.profile.affected:
                pre = s.features[d - 12 : d, j]
                post = s.features[d : d + 5, j]
                pre, post = pre[np.isfinite(pre)], post[np.isfinite(post)]
                ratios.append(abs(post.mean() - pre.mean()) / pre.std())
        assert np.mean(ratios) > 1.0


class TestProfiles:
    def test_shiftless_types(self):
        cfg = CohortConfig(event_type_mix={"societal": 0.5, "other": 0.5})
        rng = user_rng(0, 0)
        for _ in range(20):
            prof = make_profile(rng, cfg)
            assert prof.type in SHIFTLESS_TYPES
            assert all(v == 0.0 for v in prof.shifts)

    def test_location_activity_overrepresented(self):
        rng = user_rng(0, 1)
        cfg = CohortConfig()
        hits = np.zeros(len(FEATURES))
        for _ in range(400):
            hits[list(make_profile(rng, cfg).affected)] += 1
        favored = np.array([n.startswith(("loc", "act")) for n in FEATURES.names])
        assert hits[favored].mean() > 1.5 * hits[~favored].mean()

    def test_societal_event_leaves_series_untouched(self):
        base = CohortConfig(n_users=1, seed=3, event_type_mix={"societal": 1.0}, miss_prob=0.0)
        series, events = generate_user(0, base)
        assert events
        shifted = CohortConfig(n_users=1, seed=3, event_type_mix={"societal": 1.0}, miss_prob=0.0, effect_magnitude=5.0)
        again, _ = generate_user(0, shifted)
        np.testing.assert_array_equal(series.features, again.features)

    def test_effect_curve(self):
        cfg = CohortConfig()
        prof = make_profile(user_rng(0, 2), cfg)
        c = effect_curve(prof)
        assert len(c) == prof.duration and c[0] == 1.0 and np.all(np.diff(c) < 0)
        tail = effect_curve(prof, prof.duration + 5, persistent=0.3)
        np.testing.assert_allclose(tail[prof.duration :], 0.3)

    def test_forced_affected_features(self):
        cfg = CohortConfig(affected_features=("loc_dist_ep_2",))
        prof = make_profile(user_rng(0, 3), cfg)
        assert prof.affected == (FEATURES.index("loc_dist_ep_2"),)


class TestShiftlessEvents:
    def test_day_sits_on_expected_level(self):
        cfg = CohortConfig(n_users=30, miss_prob=0.0, event_type_mix={"societal": 0.5, "other": 0.5})
        cohort, events = generate_cohort(cfg)
        noisy = CohortConfig(n_users=30, miss_prob=0.0, event_type_mix={"societal": 0.5, "other": 0.5}, quiet_shiftless=False)
        loud, _ = generate_cohort(noisy)
        by_user = {s.user_id: s for s in cohort}
        loud_by_user = {s.user_id: s for s in loud}
        assert events
        for e in events:
            quiet_dev = np.abs(by_user[e.user_id].features[e.day_index] - loud_by_user[e.user_id].features[e.day_index])
            assert np.all(quiet_dev > 0)
            other = np.delete(np.arange(len(by_user[e.user_id].features)), [ev.day_index for ev in events if ev.user_id == e.user_id])
            np.testing.assert_array_equal(by_user[e.user_id].features[other], loud_by_user[e.user_id].features[other])


class TestLabelSignatures:
    def test_same_label_same_features(self):
        cfg = CohortConfig(label_signatures=True)
        sigs = label_signatures(cfg)
        rng = user_rng(0, 4)
        for _ in range(50):
            prof = make_profile(rng, cfg)
            cols, signs = sigs[prof.perf_label]
            assert prof.affected == tuple(cols.tolist())
            if prof.type not in SHIFTLESS_TYPES:
                assert np.all(np.sign(prof.shifts) == signs)

    def test_signatures_depend_only_on_seed(self):
        a = label_signatures(CohortConfig(seed=1))
        b = label_signatures(CohortConfig(seed=1, n_users=3))
        assert all(np.array_equal(a[k][0], b[k][0]) for k in a)
        c = label_signatures(CohortConfig(seed=2))
        assert any(not np.array_equal(a[k][0], c[k][0]) for k in a)

    def test_larger_labels_shift_more(self):
        cfg = CohortConfig(label_signatures=True, event_type_mix={"work": 1.0}, shift_range=(1.0, 1.0))
        rng = user_rng(0, 5)
        size = {}
        for _ in range(200):
            prof = make_profile(rng, cfg)
            size[PerfLabel(prof.perf_label)] = abs(prof.shifts[0])
        assert size[PerfLabel.SMALL_POS] < size[PerfLabel.MED_POS] < size[PerfLabel.LARGE_POS]


class TestMissingness:
    def test_zero_probability(self, full_series):
        out, frac = inject_missingness(full_series, 0.0, 1)
        assert frac == 0.0
        np.testing.assert_array_equal(out.mask, full_series.mask)

    def test_rate(self):
        from conftest import make_series

        s = make_series(np.ones((1000, 2)), rare=np.zeros(1000, dtype=int))
        out, frac = inject_missingness(s, 0.05, 42)
        blanked = int((~out.mask.any(axis=1)).sum())
        assert 30 <= blanked <= 70 and frac == blanked / 1000

    def test_event_days_kept(self, reference):
        for s in reference[0]:
            days = s.rare_label == 1
            assert s.mask[days].all()

    def test_bad_probability(self, full_series):
        with pytest.raises(ConfigError):
            inject_missingness(full_series, 0.3, 0)


class TestMetadata:
    def test_counts_match(self, reference):
        cohort, events = reference
        meta = metadata(CohortConfig(), cohort, events)
        assert len(meta["events"]) == meta["stats"]["n_events"] == len(events)
        assert sum(meta["stats"]["events_per_type"].values()) == len(events)

import numpy as np
import pytest

from rarelife.timeseries import FEATURES, MISSING, EventMeta, UserSeries


def make_series(features, user_id="u0", day_index=None, rare=None, perf=None, events=None, mask=None):
    """Build a UserSeries; NaN cells in ``features`` are missing."""
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    T = len(features)
    day_index = np.arange(T) if day_index is None else np.asarray(day_index)
    if mask is None:
        mask = np.isfinite(features)
    rare = np.full(T, MISSING) if rare is None else np.asarray(rare)
    perf = np.full(T, MISSING) if perf is None else np.asarray(perf)
    return UserSeries(user_id, day_index, features, mask, rare, perf, events or {})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def full_series(rng):
    """A 40-day, fully observed series over the full feature schema."""
    T = 40
    X = rng.normal(size=(T, len(FEATURES))) * 3 + 10
    rare = np.zeros(T, dtype=int)
    rare[25] = 1
    perf = np.full(T, MISSING)
    perf[25] = 2
    return make_series(X, rare=rare, perf=perf, events={25: EventMeta("work", "negative")})

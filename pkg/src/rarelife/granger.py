"""Pre/post event Granger-causality analysis.

For every reported event the series is cut into a pre-event segment (up to
and including the event day) and a post-event segment. For each feature we
test whether the pre segment Granger-causes the post segment with the SSR
F-test at lags 1..6, aligning the two segments position by position after
truncating them to a common length.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from rarelife.errors import DataError
from rarelife.fdist import f_upper_tail
from rarelife.timeseries import FEATURES, FeatureSchema, UserSeries, impute_mean

logger = logging.getLogger(__name__)

MAX_LAG = 6
SIGNIFICANCE = 0.05
EVENT_SPAN = 30
MIN_SIDE = 15
# SSR_u below this fraction of the target's total sum of squares counts as a perfect fit.
_DEGENERATE_RTOL = 1e-20


class RankDeficientError(DataError):
    """Design matrix columns are linearly dependent."""

    def __init__(self, dependent: list[int]):
        self.dependent = dependent
        super().__init__(f"design matrix is rank deficient; columns {dependent} depend on earlier columns")


class SplitSkipped(DataError):
    """An event cannot supply both pre and post segments."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


@dataclass
class LaggedRegression:
    coefficients: np.ndarray
    ssr: float
    n_obs: int
    n_params: int


def ols_fit(y, X) -> LaggedRegression:
    """Least squares through a thin QR decomposition.

    A column whose diagonal entry in R is negligible relative to the largest
    one is reported as dependent on the columns before it.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if len(y) != n:
        raise ValueError(f"y has {len(y)} rows but X has {n}")
    if n <= p:
        raise DataError(f"need more observations than parameters, got {n} <= {p}")
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    tol = max(n, p) * np.finfo(float).eps * max(diag.max(initial=0.0), 1.0)
    dependent = [int(j) for j in np.flatnonzero(diag <= tol)]
    if dependent:
        raise RankDeficientError(dependent)
    beta = solve_triangular(R, Q.T @ y)
    resid = y - X @ beta
    ssr = float(resid @ resid)
    if not np.isfinite(ssr):
        raise DataError("non-finite residual sum of squares")
    return LaggedRegression(beta, ssr, n, p)


def _full_rank_fit(y: np.ndarray, X: np.ndarray) -> LaggedRegression:
    """``ols_fit`` after dropping columns that depend on earlier ones."""
    keep = np.arange(X.shape[1])
    while True:
        try:
            return ols_fit(y, X[:, keep])
        except RankDeficientError as exc:
            keep = np.delete(keep, exc.dependent)


def lag_matrix(x: np.ndarray, L: int) -> np.ndarray:
    """Columns ``x_{t-1} .. x_{t-L}`` for ``t = L .. n-1``."""
    n = len(x)
    return np.column_stack([x[L - k : n - k] for k in range(1, L + 1)])


@dataclass
class LagTest:
    lag: int
    F: float
    p: float
    df_num: int
    df_den: int
    ssr_restricted: float
    ssr_unrestricted: float
    degenerate: bool = False


@dataclass
class GrangerResult:
    lags: list[LagTest]
    significant: bool
    alpha: float = SIGNIFICANCE
    skipped_lags: list[int] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return any(t.degenerate for t in self.lags)

    @property
    def pvalues(self) -> dict[int, float]:
        return {t.lag: t.p for t in self.lags}


def granger_f_test(target, source, max_lag: int = MAX_LAG, alpha: float = SIGNIFICANCE) -> GrangerResult:
    """Does ``source`` help predict ``target`` beyond target's own lags?

    Lags whose denominator degrees of freedom ``n - 3L - 1`` would be below
    one are skipped and listed in ``skipped_lags``. With collinear lag columns
    the degrees of freedom follow the columns that survive.
    """
    y = np.asarray(target, dtype=float)
    x = np.asarray(source, dtype=float)
    if y.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"target and source must be equal-length vectors, got {y.shape} and {x.shape}")
    n = len(y)
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    if n < 2 * max_lag + 3:
        raise DataError(f"series of length {n} too short for lag {max_lag} (need {2 * max_lag + 3})")
    tests, skipped = [], []
    for L in range(1, max_lag + 1):
        n_eff = n - L
        df_den = n_eff - 2 * L - 1
        if df_den < 1:
            skipped.append(L)
            continue
        yt = y[L:]
        ones = np.ones((n_eff, 1))
        restricted = _full_rank_fit(yt, np.hstack([ones, lag_matrix(y, L)]))
        unrestricted = _full_rank_fit(yt, np.hstack([ones, lag_matrix(y, L), lag_matrix(x, L)]))
        ssr_r, ssr_u = restricted.ssr, unrestricted.ssr
        # Collinear lag columns (a shifted copy, a constant segment) are dropped;
        # the test then counts only the source columns that remain.
        df_num = unrestricted.n_params - restricted.n_params
        df_den = n_eff - unrestricted.n_params
        # Nested least squares: the larger model can only fit better, up to rounding.
        assert ssr_r >= ssr_u - 1e-9 * max(ssr_r, 1.0), (ssr_r, ssr_u)
        tss = float(np.sum((yt - yt.mean()) ** 2))
        if df_num == 0:
            tests.append(LagTest(L, 0.0, 1.0, 0, df_den, ssr_r, ssr_u))
            continue
        if ssr_r <= _DEGENERATE_RTOL * tss or tss == 0.0:
            # Own lags already explain the target exactly; nothing left for the source.
            tests.append(LagTest(L, 0.0, 1.0, df_num, df_den, ssr_r, ssr_u, degenerate=True))
            continue
        if ssr_u <= _DEGENERATE_RTOL * tss or df_den < 1:
            tests.append(LagTest(L, float("inf"), 0.0, df_num, df_den, ssr_r, ssr_u, degenerate=True))
            continue
        F = max(0.0, (ssr_r - ssr_u) / df_num) / (ssr_u / df_den)
        assert F >= 0.0
        tests.append(LagTest(L, F, f_upper_tail(F, df_num, df_den), df_num, df_den, ssr_r, ssr_u))
    if skipped:
        logger.debug("length %d: lags %s lack residual degrees of freedom", n, skipped)
    return GrangerResult(tests, any(t.p < alpha for t in tests), alpha, skipped)


def pre_post_split(series: UserSeries, event_day: int, span: int = EVENT_SPAN, min_side: int = MIN_SIDE) -> tuple[np.ndarray, np.ndarray]:
    """Pre (days <= event, last ``span``) and post (days > event, first ``span``).

    Both segments are truncated to ``n = min(len(pre), len(post))``: the last
    n pre days and the first n post days, paired by position.
    """
    days = series.day_index
    if event_day not in set(days.tolist()):
        raise SplitSkipped(f"event day {event_day} is not in the series")
    pre_idx = np.flatnonzero((days <= event_day) & (days > event_day - span))
    post_idx = np.flatnonzero((days > event_day) & (days <= event_day + span))
    if len(pre_idx) < min_side or len(post_idx) < min_side:
        raise SplitSkipped(f"only {len(pre_idx)} pre and {len(post_idx)} post days (need {min_side} each)")
    n = min(len(pre_idx), len(post_idx))
    return series.features[pre_idx[-n:]], series.features[post_idx[:n]]


@dataclass
class EventGranger:
    user_id: str
    day_index: int
    n_days: int
    results: dict[str, GrangerResult]
    untestable: dict[str, str] = field(default_factory=dict)


@dataclass
class GrangerReport:
    features: list[str]
    counts: dict[str, int]
    totals: dict[str, int]
    events: list[EventGranger] = field(default_factory=list)
    skipped: list[tuple[str, int, str]] = field(default_factory=list)
    max_lag: int = MAX_LAG

    @property
    def n_tested(self) -> int:
        return len(self.events)

    def table(self) -> list[dict]:
        return [{"feature": f, "count": self.counts[f], "total": self.totals[f]} for f in self.features]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["feature", "count", "total"], lineterminator="\n")
            w.writeheader()
            w.writerows(self.table())

    def to_json(self) -> dict:
        return {
            "max_lag": self.max_lag,
            "n_tested": self.n_tested,
            "skipped": [{"user_id": u, "day_index": d, "reason": r} for u, d, r in self.skipped],
            "events": [
                {
                    "user_id": e.user_id,
                    "day_index": e.day_index,
                    "n_days": e.n_days,
                    "untestable": e.untestable,
                    "features": {
                        name: {
                            "significant": res.significant,
                            "degenerate": res.degenerate,
                            "lags": [{"lag": t.lag, "F": t.F if np.isfinite(t.F) else None, "p": t.p} for t in res.lags],
                        }
                        for name, res in e.results.items()
                    },
                }
                for e in self.events
            ],
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def significance_counts(
    cohort: Sequence[UserSeries],
    max_lag: int = MAX_LAG,
    alpha: float = SIGNIFICANCE,
    schema: FeatureSchema = FEATURES,
    span: int = EVENT_SPAN,
) -> GrangerReport:
    """Per feature, how many event series show pre Granger-causing post."""
    names = list(schema.names)
    report = GrangerReport(names, dict.fromkeys(names, 0), dict.fromkeys(names, 0), max_lag=max_lag)
    for series in cohort:
        if np.isnan(series.features).any():
            series = impute_mean(series)
        event_days = sorted(set(series.events) | set(series.event_days()))
        for day in event_days:
            try:
                pre, post = pre_post_split(series, day, span)
            except SplitSkipped as exc:
                report.skipped.append((series.user_id, day, exc.reason))
                continue
            ev = EventGranger(series.user_id, day, len(pre), {})
            for j, name in enumerate(names):
                try:
                    res = granger_f_test(post[:, j], pre[:, j], max_lag, alpha)
                except DataError as exc:
                    ev.untestable[name] = str(exc)
                    continue
                ev.results[name] = res
                report.totals[name] += 1
                report.counts[name] += int(res.significant)
            report.events.append(ev)
    logger.info("granger: %d event series tested, %d skipped", report.n_tested, len(report.skipped))
    return report

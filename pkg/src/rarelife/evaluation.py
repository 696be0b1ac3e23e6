"""Split protocol, exact-day metrics, multi-seed aggregation and sweeps.

One "split" is a per-user random 80:10:10 partition of normal windows into
train, validation and test; every rare window goes to test. Normalization
statistics are refit per split on the days covered by train and validation
windows. Overlapping windows mean train and test share days; that is part of
the protocol, not a leak of labels.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from rarelife.errors import ConfigError, DataError
from rarelife.baselines import day_vectors, lstm_ed_config, lstm_ed_train
from rarelife.iforest import iforest_detect, iforest_fit
from rarelife.mtad import (
    MtadConfig,
    MtadModel,
    ScoreTable,
    TrainReport,
    decide,
    predictor_only_decisions,
    rescale,
    score_windows,
    thresholds_from_scores,
    train,
)
from rarelife.timeseries import (
    EVENT_TYPES,
    VALENCES,
    UserSeries,
    WindowSet,
    forward_fill_labels,
    impute_mean,
    normalize_within_subject,
    window_set,
)

logger = logging.getLogger(__name__)

BASE_METHODS = ("mtad", "lstm_ed", "iforest", "predictor_only")
PT_METHODS = {"mtad": "mtad_pt", "lstm_ed": "lstm_ed_pt"}
ALL_METHODS = BASE_METHODS + tuple(PT_METHODS.values())
DECLARED_SWEEPS = {"window_size": (6, 8, 10, 12), "lambda": (0.5, 2.0, 5.0, 10.0)}

# Rows reported in the source study for methods not re-implemented here.
PAPER_REPORTED = (
    ("OCSVM", 0.32, 0.04, 0.07, 0.00, 0.12, 0.06),
    ("LSTM-VAE", 0.28, 0.04, 0.07, 0.01, 0.12, 0.01),
    ("DAGMM", 0.04, 0.01, 0.11, 0.02, 0.06, 0.01),
    ("LSTM-VAE-PT", 0.25, 0.02, 0.27, 0.02, 0.26, 0.02),
)


# Desk-scale model used by default in experiments. ``MtadConfig()`` itself keeps
# the full-size settings (hidden 100, lr 1e-4, 500 epochs, float64).
REFERENCE_MODEL = {"hidden": 32, "lr": 1e-3, "epochs": 60, "dtype": "float32"}


@dataclass
class ExperimentConfig:
    window: int = 10
    lam: float = 2.0
    percentile: float = 95.0
    min_user_windows: int = 5
    statistic: str = "delta"
    split_mode: str = "random"
    model: dict = field(default_factory=lambda: dict(REFERENCE_MODEL))
    lstm_ed_epochs: int = 300
    iforest_trees: int = 200
    iforest_subsample: int = 256
    iforest_contamination: float = 0.02

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError(f"window must be >= 2, got {self.window}")
        if self.lam <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not 0 < self.percentile < 100:
            raise ConfigError(f"percentile must be in (0, 100), got {self.percentile}")
        if self.min_user_windows < 1:
            raise ConfigError(f"min_user_windows must be positive, got {self.min_user_windows}")
        if self.split_mode not in ("random", "contiguous"):
            raise ConfigError(f"split_mode must be 'random' or 'contiguous', got {self.split_mode!r}")
        if self.statistic not in ("delta", "alpha"):
            raise ConfigError(f"statistic must be 'delta' or 'alpha', got {self.statistic!r}")
        unknown = set(self.model) - set(MtadConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model options {sorted(unknown)}")

    def mtad_config(self, seed: int) -> MtadConfig:
        return MtadConfig(**{**self.model, "window": self.window, "seed": seed})


# -- splits ----------------------------------------------------------------------


@dataclass
class UserSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    rare: np.ndarray


@dataclass
class SplitSpec:
    """Window end-day indices per user for one split."""

    seed: int
    users: dict[str, UserSplit]
    excluded: list[str] = field(default_factory=list)


def make_splits(windows: Mapping[str, WindowSet], seed: int, mode: str = "random", min_normal: int = 10) -> SplitSpec:
    """Per-user 80:10:10 partition of normal windows.

    Validation and test each get ``floor(0.1 * n)`` windows and train keeps
    the remainder. ``mode="contiguous"`` assigns the chronologically last
    windows to test and the ones before them to validation.
    """
    rng = np.random.default_rng(seed)
    spec = SplitSpec(seed, {})
    for user in sorted(windows):
        ws = windows[user]
        normal = ws.t[ws.rare == 0]
        rare = ws.t[ws.rare == 1]
        n = len(normal)
        if n < min_normal:
            logger.warning("user %s has %d normal windows (< %d); excluded", user, n, min_normal)
            spec.excluded.append(user)
            continue
        n_val = n_test = n // 10
        order = rng.permutation(n) if mode == "random" else np.arange(n)
        spec.users[user] = UserSplit(
            train=np.sort(normal[order[: n - n_val - n_test]]),
            val=np.sort(normal[order[n - n_val - n_test : n - n_test]]),
            test=np.sort(normal[order[n - n_test :]]),
            rare=np.sort(rare),
        )
    return spec


def prepare_cohort(cohort: Sequence[UserSeries]) -> list[UserSeries]:
    """Impute and forward-fill labels; normalization happens per split."""
    return [forward_fill_labels(impute_mean(s)) for s in cohort]


@dataclass
class SplitData:
    train: WindowSet
    val: WindowSet
    test: WindowSet


def window_index(prepared: Sequence[UserSeries], l: int) -> dict[str, WindowSet]:
    return {s.user_id: window_set(s, l) for s in prepared}


def build_split_data(prepared: Sequence[UserSeries], spec: SplitSpec, l: int) -> SplitData:
    parts: dict[str, list[WindowSet]] = {"train": [], "val": [], "test": []}
    for s in prepared:
        us = spec.users.get(s.user_id)
        if us is None:
            continue
        ends = np.concatenate([us.train, us.val])
        fit_days = np.unique((ends[:, None] - np.arange(l)[None, :]).ravel())
        ws = window_set(normalize_within_subject(s, fit_days), l)
        for name, sel in (("train", us.train), ("val", us.val), ("test", np.concatenate([us.test, us.rare]))):
            parts[name].append(ws.subset(np.isin(ws.t, sel)))
    data = SplitData(*(WindowSet.concat(parts[k]) for k in ("train", "val", "test")))
    if np.any(data.train.rare == 1) or np.any(data.val.rare == 1):
        raise DataError("rare window leaked into train or validation")
    return data


# -- metrics -------------------------------------------------------------------------


def score_exact_day(decisions, truth) -> tuple[float, float, float]:
    """Positive-class precision, recall and F1; undefined ratios are 0."""
    d = np.asarray(decisions).astype(int)
    y = np.asarray(truth).astype(int)
    if d.shape != y.shape:
        raise ValueError(f"decisions {d.shape} and truth {y.shape} are not aligned")
    tp = int(np.sum((d == 1) & (y == 1)))
    fp = int(np.sum((d == 1) & (y == 0)))
    fn = int(np.sum((d == 0) & (y == 1)))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass
class MetricRow:
    method: str
    precision: list[float]
    recall: list[float]
    f1: list[float]
    window: int
    lam: float
    personalized: bool
    source: str = "computed"

    @property
    def n_splits(self) -> int:
        return len(self.f1)

    def mean(self, metric: str) -> float:
        return float(np.mean(getattr(self, metric)))

    def std(self, metric: str) -> float:
        return float(np.std(getattr(self, metric)))

    @property
    def summary(self) -> dict:
        out = {"method": self.method, "window": self.window, "lambda": self.lam, "personalized": int(self.personalized)}
        for metric, tag in (("precision", "P"), ("recall", "R"), ("f1", "F1")):
            out[f"{tag}_mean"] = self.mean(metric)
            out[f"{tag}_std"] = self.std(metric)
        out["n_splits"] = self.n_splits
        out["source"] = self.source
        return out


def aggregate(method: str, per_split: Sequence[tuple[float, float, float]], window: int, lam: float) -> MetricRow:
    p, r, f = zip(*per_split) if per_split else ((), (), ())
    return MetricRow(method, list(p), list(r), list(f), window, lam, method.endswith("_pt"))


# -- running methods ---------------------------------------------------------------------


@dataclass
class MethodOutput:
    decisions: np.ndarray
    alpha: np.ndarray
    s: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray


@dataclass
class SplitResult:
    seed: int
    test: WindowSet
    outputs: dict[str, MethodOutput]
    val_users: np.ndarray | None = None
    mtad_val: ScoreTable | None = None
    mtad_test: ScoreTable | None = None
    reports: dict[str, TrainReport] = field(default_factory=dict)
    users_per_split: int = 0

    def metrics(self, method: str) -> tuple[float, float, float]:
        return score_exact_day(self.outputs[method].decisions, self.test.rare)


def expand_methods(methods: Iterable[str], personalized: bool) -> list[str]:
    out = []
    for m in methods:
        if m not in ALL_METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(ALL_METHODS)}")
        if m not in out:
            out.append(m)
        if personalized and m in PT_METHODS and PT_METHODS[m] not in out:
            out.append(PT_METHODS[m])
    return out


def _threshold_outputs(
    scores_val: ScoreTable,
    scores_test: ScoreTable,
    val_users: np.ndarray,
    test_users: np.ndarray,
    config: ExperimentConfig,
    personalized: bool,
) -> MethodOutput:
    val_values = scores_val.delta if config.statistic == "delta" else scores_val.alpha
    ts = thresholds_from_scores(val_values, val_users, config.percentile, personalized, config.min_user_windows, config.statistic)
    if config.statistic == "alpha":
        scores_test = ScoreTable(scores_test.alpha, scores_test.y_hat, scores_test.r, np.ones_like(scores_test.s), scores_test.alpha)
    decisions, gammas = decide(scores_test, test_users, ts, personalized)
    return MethodOutput(decisions, scores_test.alpha, scores_test.s, scores_test.delta, gammas)


def run_split(prepared: Sequence[UserSeries], seed: int, methods: Sequence[str], config: ExperimentConfig) -> SplitResult:
    """Train and evaluate every requested method on one split."""
    l = config.window
    spec = make_splits(window_index(prepared, l), seed, config.split_mode)
    data = build_split_data(prepared, spec, l)
    result = SplitResult(seed, data.test, {}, data.val.user, users_per_split=len(spec.users))
    wanted = set(methods)

    if wanted & {"mtad", "mtad_pt", "predictor_only"}:
        model, report = train(MtadModel(config.mtad_config(seed)), data.train, data.val)
        result.reports["mtad"] = report
        sv, st = score_windows(model, data.val, config.lam), score_windows(model, data.test, config.lam)
        result.mtad_val, result.mtad_test = sv, st
        for m, pt in (("mtad", False), ("mtad_pt", True)):
            if m in wanted:
                result.outputs[m] = _threshold_outputs(sv, st, data.val.user, data.test.user, config, pt)
        if "predictor_only" in wanted:
            d = predictor_only_decisions(st.y_hat)
            result.outputs["predictor_only"] = MethodOutput(d, st.alpha, st.s, st.delta, np.full(len(d), np.nan))

    if wanted & {"lstm_ed", "lstm_ed_pt"}:
        model, report = lstm_ed_train(data.train, data.val, lstm_ed_config(config.mtad_config(seed), config.lstm_ed_epochs))
        result.reports["lstm_ed"] = report
        sv, st = score_windows(model, data.val), score_windows(model, data.test)
        for m, pt in (("lstm_ed", False), ("lstm_ed_pt", True)):
            if m in wanted:
                result.outputs[m] = _threshold_outputs(sv, st, data.val.user, data.test.user, config, pt)

    if "iforest" in wanted:
        forest = iforest_fit(
            day_vectors(data.train),
            seed=seed,
            n_estimators=config.iforest_trees,
            subsample=config.iforest_subsample,
            contamination=config.iforest_contamination,
        )
        score = forest.score(day_vectors(data.test))
        d = iforest_detect(forest, day_vectors(data.test))
        result.outputs["iforest"] = MethodOutput(d, score, np.ones(len(d)), score, np.full(len(d), forest.threshold))
    return result


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seeds: list[int]
    methods: list[str]
    rows: dict[str, MetricRow]
    splits: list[SplitResult]


def run_methods(
    cohort: Sequence[UserSeries],
    methods: Iterable[str],
    seeds: Iterable[int] = range(10),
    config: ExperimentConfig | None = None,
    personalized: bool = False,
    prepared: Sequence[UserSeries] | None = None,
) -> ExperimentResult:
    """Run every method on every split and aggregate per method.

    Splits run sequentially; each split trains its models once and derives
    all variants (global and personalized thresholds, predictor-only) from the
    same trained weights.
    """
    config = config or ExperimentConfig()
    methods = expand_methods(methods, personalized)
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("at least one seed is required")
    prepared = list(prepared) if prepared is not None else prepare_cohort(cohort)
    splits = []
    for seed in seeds:
        try:
            splits.append(run_split(prepared, seed, methods, config))
        except Exception:
            logger.error("split %d failed", seed)
            raise
        logger.info("split %d done: %s", seed, {m: round(splits[-1].metrics(m)[2], 3) for m in methods})
    rows = {m: aggregate(m, [sp.metrics(m) for sp in splits], config.window, config.lam) for m in methods}
    return ExperimentResult(config, seeds, methods, rows, splits)


def run_experiment(method: str, cohort: Sequence[UserSeries], seeds: Iterable[int] = range(10), config: ExperimentConfig | None = None) -> MetricRow:
    return run_methods(cohort, [method], seeds, config).rows[method]


# -- sweeps ----------------------------------------------------------------------


def lambda_rows(result: ExperimentResult, lambdas: Sequence[float]) -> list[MetricRow]:
    """Re-threshold stored MTAD scores at each decay constant (no retraining)."""
    rows = []
    cfg = result.config
    for lam in lambdas:
        for method in result.methods:
            per_split = []
            for sp in result.splits:
                if method in ("mtad", "mtad_pt"):
                    sv, st = rescale(sp.mtad_val, lam), rescale(sp.mtad_test, lam)
                    out = _threshold_outputs(sv, st, sp.val_users, sp.test.user, cfg, method == "mtad_pt")
                    per_split.append(score_exact_day(out.decisions, sp.test.rare))
                else:
                    per_split.append(sp.metrics(method))
            rows.append(aggregate(method, per_split, cfg.window, lam))
    return rows


def sweep(
    parameter: str,
    cohort: Sequence[UserSeries],
    methods: Iterable[str],
    seeds: Iterable[int] = range(10),
    config: ExperimentConfig | None = None,
    values: Sequence[float] | None = None,
    personalized: bool = False,
) -> list[MetricRow]:
    """One MetricRow per (value, method) for ``window_size`` or ``lambda``."""
    if parameter not in DECLARED_SWEEPS:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; choose window_size or lambda")
    values = tuple(values) if values is not None else DECLARED_SWEEPS[parameter]
    off = [v for v in values if v not in DECLARED_SWEEPS[parameter]]
    if off:
        logger.warning("sweep values %s are outside the declared set %s", off, DECLARED_SWEEPS[parameter])
    config = config or ExperimentConfig()
    seeds = list(seeds)
    prepared = prepare_cohort(cohort)
    if parameter == "lambda":
        result = run_methods(cohort, methods, seeds, config, personalized, prepared)
        return lambda_rows(result, values)
    rows = []
    for l in values:
        cfg = ExperimentConfig(**{**asdict(config), "window": int(l)})
        result = run_methods(cohort, methods, seeds, cfg, personalized, prepared)
        rows.extend(result.rows[m] for m in result.methods)
    return rows


# -- event types -------------------------------------------------------------------------


@dataclass
class EventTypeReport:
    """Totals, mean detected count over splits, and recall per group."""

    totals: dict[str, int]
    detected: dict[str, float]

    def recall(self, group: str) -> float:
        t = self.totals.get(group, 0)
        return self.detected.get(group, 0.0) / t if t else 0.0

    def rows(self) -> list[dict]:
        out = []
        for g in (*EVENT_TYPES, *VALENCES):
            kind = "type" if g in EVENT_TYPES else "valence"
            out.append({"group": kind, "name": g, "total": self.totals.get(g, 0), "detected": self.detected.get(g, 0.0), "recall": self.recall(g)})
        return out


def cohort_events(cohort: Sequence[UserSeries]) -> list[tuple[str, int, str, str]]:
    """``(user_id, day_index, type, valence)`` for every reported event."""
    return [(s.user_id, int(d), ev.type, ev.valence) for s in cohort for d, ev in sorted(s.events.items())]


def event_type_breakdown(splits: Sequence[SplitResult], method: str, events: Sequence[tuple[str, int, str, str]]) -> EventTypeReport:
    """Per-type and per-valence recall of ``method`` on rare windows.

    ``events`` lists ``(user_id, day_index, type, valence)``; an event with no
    rare window (too early in its series) counts as never detected.
    """
    totals: dict[str, int] = defaultdict(int)
    detected: dict[str, float] = defaultdict(float)
    for _, _, etype, val in events:
        totals[etype] += 1
        totals[val] += 1
    for sp in splits:
        out = sp.outputs[method]
        hit = {(str(u), int(t)) for u, t, d, y in zip(sp.test.user, sp.test.t, out.decisions, sp.test.rare) if y == 1 and d == 1}
        for user, day, etype, val in events:
            if (user, day) in hit:
                detected[etype] += 1.0 / len(splits)
                detected[val] += 1.0 / len(splits)
    return EventTypeReport(dict(totals), dict(detected))


# -- result files -------------------------------------------------------------------------

METRIC_COLUMNS = ["method", "window", "lambda", "personalized", "P_mean", "P_std", "R_mean", "R_std", "F1_mean", "F1_std", "n_splits", "source"]
DECISION_COLUMNS = ["method", "user_id", "t", "alpha", "s", "delta", "gamma_used", "decision", "true_label"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else ""
    return str(v)


def write_rows(path: str | Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def paper_reported_rows(window: int = 10, lam: float = 2.0) -> list[dict]:
    out = []
    for name, p, ps, r, rs, f, fs in PAPER_REPORTED:
        out.append(
            {
                "method": name,
                "window": window,
                "lambda": lam,
                "personalized": int(name.endswith("-PT")),
                "P_mean": p,
                "P_std": ps,
                "R_mean": r,
                "R_std": rs,
                "F1_mean": f,
                "F1_std": fs,
                "n_splits": 10,
                "source": "paper-reported",
            }
        )
    return out


def write_metrics(path: str | Path, rows: Iterable[MetricRow], include_reported: bool = True) -> None:
    rows = [r.summary for r in rows]
    if include_reported:
        rows += paper_reported_rows()
    write_rows(path, METRIC_COLUMNS, rows)


def write_decisions(path: str | Path, split: SplitResult) -> None:
    def gen():
        for method, out in split.outputs.items():
            for k in range(len(split.test)):
                yield {
                    "method": method,
                    "user_id": split.test.user[k],
                    "t": int(split.test.t[k]),
                    "alpha": float(out.alpha[k]),
                    "s": float(out.s[k]),
                    "delta": float(out.delta[k]),
                    "gamma_used": float(out.gamma[k]),
                    "decision": int(out.decisions[k]),
                    "true_label": int(split.test.rare[k]),
                }

    write_rows(path, DECISION_COLUMNS, gen())


def read_decisions(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Decisions and truth per method from a decision CSV."""
    acc: dict[str, tuple[list[int], list[int]]] = defaultdict(lambda: ([], []))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d, y = acc[row["method"]]
            d.append(int(row["decision"]))
            y.append(int(row["true_label"]))
    return {m: (np.array(d), np.array(y)) for m, (d, y) in acc.items()}


def write_event_types(path: str | Path, report: EventTypeReport) -> None:
    write_rows(path, ["group", "name", "total", "detected", "recall"], report.rows())


def write_sweep(path: str | Path, rows: Iterable[MetricRow]) -> None:
    write_rows(path, METRIC_COLUMNS, (r.summary for r in rows))


def write_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

"""Per-user behavioral time series: schema, preprocessing and windowing.

A cohort is a list of :class:`UserSeries`. Feature values are stored as a
(T, m) float array with NaN for missing cells; the boolean ``mask`` records
which cells were actually observed and survives imputation so the
missingness rule can be audited afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from rarelife.errors import DataError

logger = logging.getLogger(__name__)

MISSING = -1

BASE_FEATURES = (
    "act_walk_dur",
    "act_still_dur",
    "act_run_dur",
    "loc_dist",
    "unlock_dur",
    "unlock_num",
    "loc_visit_num",
)
DAILY_FEATURES = ("loc_unique_num",)
N_EPOCHS = 4

EVENT_TYPES = ("personal", "work", "health", "financial", "societal", "other")
VALENCES = ("positive", "negative")


class PerfLabel(IntEnum):
    """Self-reported workplace-performance impact; code order is fixed."""

    UNKNOWN = 0
    LARGE_NEG = 1
    MED_NEG = 2
    SMALL_NEG = 3
    NO_EFFECT = 4
    SMALL_POS = 5
    MED_POS = 6
    LARGE_POS = 7


PERF_NAMES = ("Unknown", "LargeNeg", "MedNeg", "SmallNeg", "NoEffect", "SmallPos", "MedPos", "LargePos")
N_CLASSES = len(PERF_NAMES)


def perf_code(name: str) -> int:
    try:
        return PERF_NAMES.index(name)
    except ValueError:
        raise DataError(f"unknown performance label {name!r}") from None


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names with their 1-4 epoch tag (``None`` for daily)."""

    names: tuple[str, ...]
    epochs: tuple[int | None, ...]

    def __post_init__(self):
        if len(self.names) != 29 or len(self.epochs) != 29:
            raise DataError(f"schema must hold 29 features, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise DataError("feature names must be unique")
        epoch_bases: dict[str, set[int]] = {}
        for name, ep in zip(self.names, self.epochs):
            if ep is not None:
                epoch_bases.setdefault(name.rsplit("_ep_", 1)[0], set()).add(ep)
        for base, eps in epoch_bases.items():
            if eps != set(range(1, N_EPOCHS + 1)):
                raise DataError(f"epoch feature {base!r} is missing epochs {sorted(set(range(1, 5)) - eps)}")

    @classmethod
    def default(cls) -> FeatureSchema:
        names: list[str] = []
        epochs: list[int | None] = []
        for base in BASE_FEATURES:
            for ep in range(1, N_EPOCHS + 1):
                names.append(f"{base}_ep_{ep}")
                epochs.append(ep)
        for base in DAILY_FEATURES:
            names.append(base)
            epochs.append(None)
        return cls(tuple(names), tuple(epochs))

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


FEATURES = FeatureSchema.default()


@dataclass(frozen=True)
class EventMeta:
    type: str
    valence: str

    def __post_init__(self):
        if self.type not in EVENT_TYPES:
            raise DataError(f"unknown event type {self.type!r}")
        if self.valence not in VALENCES:
            raise DataError(f"unknown valence {self.valence!r}")


@dataclass(frozen=True)
class DayRecord:
    user_id: str
    day_index: int
    features: np.ndarray
    mask: np.ndarray
    rare_label: int
    perf_label: int
    event_meta: EventMeta | None = None


@dataclass
class UserSeries:
    """One participant's daily series.

    ``rare_label`` and ``perf_label`` use :data:`MISSING` for unlabeled days
    until :func:`forward_fill_labels` runs. ``events`` maps a day index to its
    reported event metadata.
    """

    user_id: str
    day_index: np.ndarray
    features: np.ndarray
    mask: np.ndarray
    rare_label: np.ndarray
    perf_label: np.ndarray
    events: dict[int, EventMeta] = field(default_factory=dict)
    norm_stats: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        T = len(self.day_index)
        if self.features.shape[0] != T or self.mask.shape != self.features.shape:
            raise DataError(f"user {self.user_id}: inconsistent array shapes")
        if len(self.rare_label) != T or len(self.perf_label) != T:
            raise DataError(f"user {self.user_id}: label length mismatch")
        if T and np.any(np.diff(self.day_index) <= 0):
            raise DataError(f"user {self.user_id}: day_index must be strictly increasing")

    @property
    def T(self) -> int:
        return len(self.day_index)

    @property
    def days(self) -> list[DayRecord]:
        return [
            DayRecord(
                self.user_id,
                int(d),
                self.features[k],
                self.mask[k],
                int(self.rare_label[k]),
                int(self.perf_label[k]),
                self.events.get(int(d)),
            )
            for k, d in enumerate(self.day_index)
        ]

    def event_days(self) -> list[int]:
        """Day indices carrying a rare label of 1."""
        return [int(d) for d in self.day_index[self.rare_label == 1]]

    def copy(self) -> UserSeries:
        return replace(
            self,
            day_index=self.day_index.copy(),
            features=self.features.copy(),
            mask=self.mask.copy(),
            rare_label=self.rare_label.copy(),
            perf_label=self.perf_label.copy(),
            events=dict(self.events),
        )


def impute_mean(series: UserSeries) -> UserSeries:
    """Fill gaps in ``day_index`` and replace missing cells by the user mean.

    Inserted days are fully missing (mask all False) and carry missing
    labels, so label forward-filling treats them like any unlabeled day.
    """
    start, stop = int(series.day_index[0]), int(series.day_index[-1])
    full = np.arange(start, stop + 1)
    pos = series.day_index - start
    m = series.features.shape[1]
    feats = np.full((len(full), m), np.nan)
    feats[pos] = np.where(series.mask, series.features, np.nan)
    mask = np.zeros((len(full), m), dtype=bool)
    mask[pos] = series.mask
    rare = np.full(len(full), MISSING, dtype=int)
    rare[pos] = series.rare_label
    perf = np.full(len(full), MISSING, dtype=int)
    perf[pos] = series.perf_label

    n_obs = mask.sum(axis=0)
    if np.any(n_obs == 0):
        names = FEATURES.names if m == len(FEATURES) else [str(j) for j in range(m)]
        bad = [names[j] for j in np.flatnonzero(n_obs == 0)]
        raise DataError(f"user {series.user_id}: no observed values for feature(s) {', '.join(bad)}")
    means = np.nansum(feats, axis=0) / n_obs
    feats = np.where(mask, feats, means)
    return replace(series, day_index=full, features=feats, mask=mask, rare_label=rare, perf_label=perf, events=dict(series.events))


def normalize_within_subject(series: UserSeries, fit_days: Iterable[int] | None = None) -> UserSeries:
    """Standardize each feature with statistics from ``fit_days`` only.

    Args:
        series: An imputed series (no NaN cells).
        fit_days: Day indices whose rows define mean and population standard
            deviation. ``None`` means all days.

    Zero-variance features map to 0.
    """
    if fit_days is None:
        rows = np.ones(series.T, dtype=bool)
    else:
        rows = np.isin(series.day_index, np.fromiter(fit_days, dtype=int))
    if not rows.any():
        raise DataError(f"user {series.user_id}: fit_days selects no rows")
    ref = series.features[rows]
    mean = ref.mean(axis=0)
    scale = ref.std(axis=0)
    safe = np.where(scale > 0, scale, 1.0)
    out = np.where(scale > 0, (series.features - mean) / safe, 0.0)
    return replace(series, features=out, norm_stats=(mean, scale))


def denormalize(series: UserSeries) -> np.ndarray:
    """Map normalized features back to the original scale."""
    if series.norm_stats is None:
        raise DataError(f"user {series.user_id}: series has not been normalized")
    mean, scale = series.norm_stats
    return series.features * scale + mean


def forward_fill_labels(series: UserSeries) -> UserSeries:
    """Resolve missing rare and performance labels.

    A missing rare label becomes 1 only on a day with reported event metadata.
    Performance labels are Unknown before the first event; afterwards the most
    recent known label carries forward.
    """
    rare = series.rare_label.copy()
    perf = series.perf_label.copy()
    current = int(PerfLabel.UNKNOWN)
    seen_event = False
    for k, d in enumerate(series.day_index):
        if rare[k] == MISSING:
            rare[k] = 1 if int(d) in series.events else 0
        if rare[k] == 1:
            seen_event = True
        if not seen_event:
            perf[k] = PerfLabel.UNKNOWN
            continue
        if perf[k] != MISSING:
            current = int(perf[k])
        perf[k] = current
    return replace(series, rare_label=rare, perf_label=perf, events=dict(series.events))


def imputed_fraction(series: UserSeries, start: int, stop: int) -> float:
    """Fraction of days in ``[start, stop]`` with no observed feature."""
    sel = (series.day_index >= start) & (series.day_index <= stop)
    if not sel.any():
        return 1.0
    return float(np.mean(~series.mask[sel].any(axis=1)))


def audit_event_spans(series: UserSeries, span: int = 30, limit: float = 0.25) -> dict[int, float]:
    """Imputed-day fraction in the +/- ``span`` window around each event.

    Raises :class:`DataError` when any event's fraction reaches ``limit``.
    """
    out = {}
    for d in series.event_days():
        frac = imputed_fraction(series, d - span, d + span)
        if frac >= limit:
            raise DataError(f"user {series.user_id}: event at day {d} has {frac:.1%} imputed days")
        out[d] = frac
    return out


def preprocess(series: UserSeries, fit_days: Iterable[int] | None = None) -> UserSeries:
    """Impute, forward-fill labels and normalize, in that order."""
    return normalize_within_subject(forward_fill_labels(impute_mean(series)), fit_days)


@dataclass(frozen=True)
class Window:
    user_id: str
    t: int
    data: np.ndarray
    perf_vec: np.ndarray
    rare_label: int


@dataclass
class WindowSet:
    """Stacked windows: ``X`` (N, l, m), ``perf`` (N, l), ``rare`` (N,)."""

    X: np.ndarray
    perf: np.ndarray
    rare: np.ndarray
    user: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.rare)

    @property
    def window(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> WindowSet:
        return WindowSet(self.X[idx], self.perf[idx], self.rare[idx], self.user[idx], self.t[idx])

    @classmethod
    def concat(cls, parts: Sequence[WindowSet]) -> WindowSet:
        parts = [p for p in parts if len(p)]
        if not parts:
            raise DataError("no windows to concatenate")
        return cls(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.perf for p in parts]),
            np.concatenate([p.rare for p in parts]),
            np.concatenate([p.user for p in parts]),
            np.concatenate([p.t for p in parts]),
        )

    @classmethod
    def from_windows(cls, windows: Sequence[Window]) -> WindowSet:
        return cls(
            np.stack([w.data for w in windows]),
            np.stack([w.perf_vec for w in windows]),
            np.array([w.rare_label for w in windows], dtype=int),
            np.array([w.user_id for w in windows], dtype=object),
            np.array([w.t for w in windows], dtype=int),
        )

    def to_windows(self) -> list[Window]:
        return [Window(self.user[k], int(self.t[k]), self.X[k], self.perf[k], int(self.rare[k])) for k in range(len(self))]


def window_set(series: UserSeries, l: int) -> WindowSet:
    """All full windows of length ``l`` as stacked arrays.

    Window ``k`` ends on row ``k + l - 1``; ``t`` holds that row's day index.
    """
    if l < 2:
        raise ValueError(f"window length must be >= 2, got {l}")
    T, m = series.features.shape
    if T < l:
        logger.warning("user %s: %d days < window %d, no windows emitted", series.user_id, T, l)
        return WindowSet(np.empty((0, l, m)), np.empty((0, l), dtype=int), np.empty(0, dtype=int), np.empty(0, dtype=object), np.empty(0, dtype=int))
    X = np.lib.stride_tricks.sliding_window_view(series.features, l, axis=0).transpose(0, 2, 1).copy()
    perf = np.lib.stride_tricks.sliding_window_view(series.perf_label, l).copy()
    rare = (series.rare_label[l - 1 :] == 1).astype(int)
    n = T - l + 1
    return WindowSet(X, perf, rare, np.full(n, series.user_id, dtype=object), series.day_index[l - 1 :].astype(int).copy())


def make_windows(series: UserSeries, l: int) -> list[Window]:
    """Rolling windows ending on each day that has ``l - 1`` days of history."""
    return window_set(series, l).to_windows()


# --- CSV ingestion -----------------------------------------------------------

CSV_LABEL_COLUMNS = ("rare_label", "perf_label", "event_type", "event_valence")


def csv_columns(schema: FeatureSchema = FEATURES) -> list[str]:
    return ["user_id", "day_index", *schema.names, *CSV_LABEL_COLUMNS]


def cohort_to_frame(cohort: Sequence[UserSeries], schema: FeatureSchema = FEATURES) -> pd.DataFrame:
    frames = []
    for s in cohort:
        df = pd.DataFrame(np.where(s.mask, s.features, np.nan), columns=list(schema.names))
        df.insert(0, "day_index", s.day_index.astype(int))
        df.insert(0, "user_id", s.user_id)
        df["rare_label"] = pd.array([None if v == MISSING else int(v) for v in s.rare_label], dtype="Int64")
        df["perf_label"] = [None if v == MISSING else PERF_NAMES[v] for v in s.perf_label]
        df["event_type"] = [s.events[int(d)].type if int(d) in s.events else None for d in s.day_index]
        df["event_valence"] = [s.events[int(d)].valence if int(d) in s.events else None for d in s.day_index]
        frames.append(df)
    if not frames:
        return pd.DataFrame(columns=csv_columns(schema))
    return pd.concat(frames, ignore_index=True)


def write_cohort_csv(cohort: Sequence[UserSeries], path: str | Path, schema: FeatureSchema = FEATURES) -> None:
    cohort_to_frame(cohort, schema).to_csv(path, index=False, na_rep="", float_format="%.10g", lineterminator="\n")


def read_cohort_csv(path: str | Path, schema: FeatureSchema = FEATURES) -> list[UserSeries]:
    """Load a participant-day CSV; empty cells are missing values."""
    df = pd.read_csv(path, dtype={"user_id": str, "perf_label": str, "event_type": str, "event_valence": str}, keep_default_na=True)
    missing = [c for c in csv_columns(schema) if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    cohort = []
    for uid, g in df.groupby("user_id", sort=False):
        g = g.sort_values("day_index")
        feats = g[list(schema.names)].to_numpy(dtype=float)
        mask = np.isfinite(feats)
        rare = g["rare_label"].fillna(MISSING).to_numpy(dtype=int)
        perf = np.array([MISSING if pd.isna(v) else perf_code(v) for v in g["perf_label"]], dtype=int)
        events = {}
        for d, et, ev in zip(g["day_index"], g["event_type"], g["event_valence"]):
            if not pd.isna(et):
                events[int(d)] = EventMeta(et, ev)
        cohort.append(UserSeries(str(uid), g["day_index"].to_numpy(dtype=int), feats, mask, rare, perf, events))
    return cohort

"""Synthetic cohorts with injected life events.

Each feature follows a per-user baseline with a weekday/weekend modulation and
AR(1) noise. Events are placed at least ``min_event_gap`` days apart; an
event shifts a subset of features (location and activity features are
favored) by a few noise standard deviations. The shift decays over the effect
duration down to a persistent share. With ``label_signatures`` each
performance label moves its own fixed feature set, so the label is legible in
behavior. Societal and "other" events carry no behavioral shift, and their day
sits on the user's expected level. Unlabeled one-day excursions supply
ordinary false alarms.

Randomness comes from one Philox stream per user, keyed by
``(seed, user_index)``, so adding users never changes existing ones.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from rarelife.errors import ConfigError
from rarelife.timeseries import (
    EVENT_TYPES,
    FEATURES,
    PERF_NAMES,
    EventMeta,
    FeatureSchema,
    PerfLabel,
    UserSeries,
)

logger = logging.getLogger(__name__)

# Reported event totals per type and valence in the source study.
TYPE_TOTALS = {"personal": 92, "work": 69, "health": 14, "financial": 13, "societal": 8, "other": 2}
VALENCE_TOTALS = {"positive": 136, "negative": 62}

SHIFTLESS_TYPES = ("societal", "other")
# Relative shift strength for event types that do move behavior.
TYPE_SCALE = {"personal": 1.0, "work": 1.0, "health": 1.15, "financial": 1.3, "societal": 0.0, "other": 0.0}

# (mean, noise sd, weekend effect) per base feature; epoch multipliers below.
_FAMILY = {
    "act_walk_dur": (15.0, 6.0, -0.1),
    "act_still_dur": (200.0, 40.0, 0.1),
    "act_run_dur": (3.0, 2.0, 0.3),
    "loc_dist": (8.0, 3.5, 0.2),
    "unlock_dur": (45.0, 15.0, 0.2),
    "unlock_num": (20.0, 6.0, 0.1),
    "loc_visit_num": (3.0, 1.2, 0.2),
    "loc_unique_num": (4.0, 1.4, 0.2),
}
_EPOCH_PROFILE = {
    "act": (0.2, 1.0, 1.2, 0.8),
    "loc": (0.3, 1.0, 1.1, 0.9),
    "unlock": (0.3, 1.0, 1.0, 1.2),
}

_POS_LABELS = (PerfLabel.NO_EFFECT, PerfLabel.SMALL_POS, PerfLabel.MED_POS, PerfLabel.LARGE_POS)
_NEG_LABELS = (PerfLabel.NO_EFFECT, PerfLabel.SMALL_NEG, PerfLabel.MED_NEG, PerfLabel.LARGE_NEG)
_LABEL_P = (0.1, 0.3, 0.3, 0.3)


def _normalized(table: dict[str, float]) -> dict[str, float]:
    total = sum(table.values())
    return {k: v / total for k, v in table.items()}


@dataclass
class CohortConfig:
    n_users: int = 126
    days_per_user: tuple[int, int] = (75, 85)
    target_anomaly_ratio: float = 0.019
    event_type_mix: dict[str, float] = field(default_factory=lambda: _normalized(TYPE_TOTALS))
    valence_mix: dict[str, float] = field(default_factory=lambda: _normalized(VALENCE_TOTALS))
    effect_magnitude: float = 1.0
    effect_duration: tuple[int, int] = (5, 15)
    ar_coefficient: float = 0.5
    miss_prob: float = 0.05
    seed: int = 42
    min_event_gap: int = 60
    lead_days: int = 12
    tail_days: int = 2
    shift_range: tuple[float, float] = (1.0, 2.0)
    affected_range: tuple[int, int] = (4, 8)
    affected_features: tuple[str, ...] | None = None
    ar_range: tuple[float, float] | None = (0.2, 0.8)
    spike_rate: tuple[float, float] = (0.0, 0.1)
    spike_size: tuple[float, float] = (2.0, 3.5)
    valence_coherence: float = 0.0
    persistent_fraction: float = 0.5
    label_signatures: bool = True
    quiet_shiftless: bool = True

    def __post_init__(self):
        self.days_per_user = tuple(self.days_per_user)
        self.effect_duration = tuple(self.effect_duration)
        self.shift_range = tuple(self.shift_range)
        self.affected_range = tuple(self.affected_range)
        if set(self.event_type_mix) - set(EVENT_TYPES):
            raise ConfigError(f"unknown event types {set(self.event_type_mix) - set(EVENT_TYPES)}")
        for name, mix in (("event_type_mix", self.event_type_mix), ("valence_mix", self.valence_mix)):
            if abs(sum(mix.values()) - 1.0) > 1e-9 or min(mix.values()) < 0:
                raise ConfigError(f"{name} must be a probability table summing to 1")
        if set(self.valence_mix) != {"positive", "negative"}:
            raise ConfigError("valence_mix needs exactly 'positive' and 'negative'")
        if not 0 < self.target_anomaly_ratio <= 0.05:
            raise ConfigError(f"target_anomaly_ratio must be in (0, 0.05], got {self.target_anomaly_ratio}")
        if not 0 <= self.miss_prob < 0.25:
            raise ConfigError(f"miss_prob must be in [0, 0.25), got {self.miss_prob}")
        if not 0 <= self.ar_coefficient < 1:
            raise ConfigError(f"ar_coefficient must be in [0, 1), got {self.ar_coefficient}")
        lo, hi = self.days_per_user
        if not 0 < lo <= hi:
            raise ConfigError(f"bad days_per_user range {self.days_per_user}")
        if not 1 <= self.effect_duration[0] <= self.effect_duration[1]:
            raise ConfigError(f"bad effect_duration range {self.effect_duration}")
        if self.affected_features is not None:
            self.affected_features = tuple(self.affected_features)
            missing = set(self.affected_features) - set(FEATURES.names)
            if missing or not self.affected_features:
                raise ConfigError(f"affected_features must name schema features, bad: {sorted(missing)}")
        if self.ar_range is not None:
            self.ar_range = tuple(self.ar_range)
            if not 0 <= self.ar_range[0] <= self.ar_range[1] < 1:
                raise ConfigError(f"ar_range must satisfy 0 <= lo <= hi < 1, got {self.ar_range}")
        self.spike_rate = tuple(self.spike_rate)
        self.spike_size = tuple(self.spike_size)
        if not 0 <= self.spike_rate[0] <= self.spike_rate[1] < 0.5:
            raise ConfigError(f"spike_rate must satisfy 0 <= lo <= hi < 0.5, got {self.spike_rate}")
        if not 0.0 <= self.persistent_fraction <= 1.0:
            raise ConfigError(f"persistent_fraction must be in [0, 1], got {self.persistent_fraction}")
        if not 0.0 <= self.valence_coherence <= 1.0:
            raise ConfigError(f"valence_coherence must be in [0, 1], got {self.valence_coherence}")
        if self.n_users < 1:
            raise ConfigError("n_users must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EventProfile:
    type: str
    valence: str
    affected: tuple[int, ...]
    shifts: tuple[float, ...]  # in units of the feature's noise sd, signed
    perf_label: int
    duration: int


@dataclass
class GeneratedEvent:
    user_id: str
    day_index: int
    profile: EventProfile


def user_rng(seed: int, user: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(user,))))


def _feature_params(schema: FeatureSchema) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean, sd, weekend = [], [], []
    for name, ep in zip(schema.names, schema.epochs):
        base = name.rsplit("_ep_", 1)[0] if ep is not None else name
        mu, s, w = _FAMILY[base]
        mult = 1.0 if ep is None else _EPOCH_PROFILE[base.split("_")[0]][ep - 1]
        mean.append(mu * mult)
        sd.append(s * max(mult, 0.3))
        weekend.append(w)
    return np.array(mean), np.array(sd), np.array(weekend)


def _affect_weights(schema: FeatureSchema) -> np.ndarray:
    w = np.array([3.0 if n.startswith(("loc", "act")) else 1.0 for n in schema.names])
    return w / w.sum()


def _valence_direction(schema: FeatureSchema) -> np.ndarray:
    """Typical sign of a positive event's shift: more movement, less idling."""
    down = ("act_still", "unlock")
    return np.array([-1.0 if n.startswith(down) else 1.0 for n in schema.names])


# Shift multiplier by label size when signatures are on.
_LABEL_SCALE = {
    PerfLabel.NO_EFFECT: 0.75,
    PerfLabel.SMALL_NEG: 1.0,
    PerfLabel.SMALL_POS: 1.0,
    PerfLabel.MED_NEG: 1.25,
    PerfLabel.MED_POS: 1.25,
    PerfLabel.LARGE_NEG: 1.5,
    PerfLabel.LARGE_POS: 1.5,
}


def label_signatures(config: CohortConfig, schema: FeatureSchema = FEATURES) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Cohort-wide ``(features, signs)`` that each performance label shifts.

    Drawn from the cohort seed alone, so every event with the same label
    moves the same features in the same direction.
    """
    rng = np.random.default_rng([config.seed, 7919])
    k = (config.affected_range[0] + config.affected_range[1]) // 2
    out = {}
    for label in sorted(_LABEL_SCALE):
        cols = np.sort(rng.choice(len(schema), size=k, replace=False, p=_affect_weights(schema)))
        out[int(label)] = (cols, np.where(rng.random(k) < 0.5, -1.0, 1.0))
    return out


def make_profile(rng: np.random.Generator, config: CohortConfig, schema: FeatureSchema = FEATURES) -> EventProfile:
    # Canonical order, so a config read back from sorted JSON samples identically.
    types = [t for t in EVENT_TYPES if t in config.event_type_mix]
    etype = types[rng.choice(len(types), p=[config.event_type_mix[t] for t in types])]
    valence = "positive" if rng.random() < config.valence_mix["positive"] else "negative"
    labels = _POS_LABELS if valence == "positive" else _NEG_LABELS
    perf = int(labels[rng.choice(len(labels), p=_LABEL_P)])
    k = int(rng.integers(config.affected_range[0], config.affected_range[1] + 1))
    affected = np.sort(rng.choice(len(schema), size=k, replace=False, p=_affect_weights(schema)))
    if config.affected_features is not None:
        affected = np.array(sorted(schema.index(n) for n in config.affected_features))
        k = len(affected)
    size = rng.uniform(*config.shift_range, size=k) * config.effect_magnitude * TYPE_SCALE[etype]
    signs = np.where(rng.random(k) < 0.5, -1.0, 1.0)
    follow = rng.random(k) < config.valence_coherence
    direction = _valence_direction(schema) * (1.0 if valence == "positive" else -1.0)
    signs = np.where(follow, direction[affected], signs)
    if config.label_signatures and config.affected_features is None:
        affected, signs = label_signatures(config, schema)[perf]
        size = rng.uniform(*config.shift_range, size=len(affected)) * config.effect_magnitude * TYPE_SCALE[etype] * _LABEL_SCALE[PerfLabel(perf)]
    duration = int(rng.integers(config.effect_duration[0], config.effect_duration[1] + 1))
    return EventProfile(etype, valence, tuple(int(a) for a in affected), tuple(float(v) for v in size * signs), perf, duration)


def effect_curve(profile: EventProfile, n_days: int | None = None, persistent: float = 0.0) -> np.ndarray:
    """Multiplier on the shift for the days starting at the event.

    The transient part decays as ``exp(-k / (duration / 2))`` and ends after
    ``duration`` days; a ``persistent`` share of the shift stays for good.
    Returns ``n_days`` values (default: the duration).
    """
    n = profile.duration if n_days is None else n_days
    k = np.arange(n)
    transient = np.where(k < profile.duration, np.exp(-k / (profile.duration / 2.0)), 0.0)
    return persistent + (1.0 - persistent) * transient


def _place_events(rng: np.random.Generator, T: int, n: int, config: CohortConfig) -> list[int]:
    first, last = config.lead_days, T - 1 - config.tail_days
    free = (last - first) - (n - 1) * config.min_event_gap
    if n and free < 0:
        raise ConfigError(f"cannot place {n} events {config.min_event_gap} days apart in a {T}-day series")
    offsets = np.sort(rng.integers(0, free + 1, size=n))
    return [int(first + o + j * config.min_event_gap) for j, o in enumerate(offsets)]


def _capacity(T: int, config: CohortConfig) -> int:
    span = T - 1 - config.tail_days - config.lead_days
    if span < 0:
        return 0
    return 1 + span // config.min_event_gap


def generate_user(index: int, config: CohortConfig, schema: FeatureSchema = FEATURES) -> tuple[UserSeries, list[GeneratedEvent]]:
    rng = user_rng(config.seed, index)
    uid = f"u{index:03d}"
    lo, hi = config.days_per_user
    T = int(rng.integers(lo, hi + 1))
    m = len(schema)
    mean, sd, weekend = _feature_params(schema)
    mean = mean * np.exp(rng.normal(0.0, 0.25, m))
    sd = sd * np.exp(rng.normal(0.0, 0.15, m))
    weekend = weekend + rng.normal(0.0, 0.1, m)
    first_weekday = int(rng.integers(7))
    is_weekend = ((np.arange(T) + first_weekday) % 7 >= 5).astype(float)

    phi = config.ar_coefficient if config.ar_range is None else float(rng.uniform(*config.ar_range))
    innov = rng.normal(size=(T, m)) * sd * np.sqrt(1.0 - phi**2)
    noise = np.empty((T, m))
    noise[0] = rng.normal(size=m) * sd
    for t in range(1, T):
        noise[t] = phi * noise[t - 1] + innov[t]
    level = mean * (1.0 + weekend * is_weekend[:, None])
    X = level + noise

    expected = config.target_anomaly_ratio * T
    cap = _capacity(T, config)
    if expected > cap:
        raise ConfigError(
            f"user {uid}: target ratio needs {expected:.2f} events but a {T}-day series fits at most {cap}"
        )
    n_events = int(np.floor(expected)) + int(rng.random() < expected - np.floor(expected))
    days = _place_events(rng, T, n_events, config)

    rare = np.zeros(T, dtype=int)
    perf = np.full(T, int(PerfLabel.UNKNOWN), dtype=int)
    events: dict[int, EventMeta] = {}
    generated = []
    for d in days:
        prof = make_profile(rng, config, schema)
        curve = effect_curve(prof, T - d, config.persistent_fraction)
        cols = list(prof.affected)
        X[d:, cols] += curve[:, None] * (np.array(prof.shifts) * sd[cols])
        if config.quiet_shiftless and prof.type in SHIFTLESS_TYPES:
            # No behavioral trace at all: the day sits on the user's expected level.
            X[d] = level[d]
        rare[d] = 1
        perf[d:] = prof.perf_label
        events[d] = EventMeta(prof.type, prof.valence)
        generated.append(GeneratedEvent(uid, d, prof))

    _add_spikes(rng, X, sd, rare, config, schema)
    series = UserSeries(uid, np.arange(T), X, np.ones((T, m), dtype=bool), rare, perf, events)
    series, _ = inject_missingness(series, config.miss_prob, rng)
    return series, generated


def _add_spikes(rng: np.random.Generator, X: np.ndarray, sd: np.ndarray, rare: np.ndarray, config: CohortConfig, schema: FeatureSchema) -> int:
    """Unlabeled one-day excursions at a per-user rate; never on event days."""
    if config.spike_rate[1] == 0.0:
        return 0
    rate = float(rng.uniform(*config.spike_rate))
    days = np.flatnonzero((rng.random(len(X)) < rate) & (rare == 0))
    for d in days:
        k = int(rng.integers(config.affected_range[0], config.affected_range[1] + 1))
        cols = rng.choice(len(schema), size=k, replace=False, p=_affect_weights(schema))
        signs = np.where(rng.random(k) < 0.5, -1.0, 1.0)
        X[d, cols] += signs * rng.uniform(*config.spike_size, size=k) * sd[cols]
    return len(days)


def inject_missingness(series: UserSeries, p: float, seed) -> tuple[UserSeries, float]:
    """Blank whole days with probability ``p``; event days are never blanked.

    ``seed`` may be an int or a Generator. Returns the new series and the
    realized fraction of blanked days.
    """
    if not 0 <= p < 0.25:
        raise ConfigError(f"missingness probability must be in [0, 0.25), got {p}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
    out = series.copy()
    drop = rng.random(series.T) < p
    drop &= series.rare_label != 1
    out.mask[drop] = False
    out.features[drop] = np.nan
    return out, float(drop.mean()) if series.T else 0.0


def generate_cohort(config: CohortConfig, schema: FeatureSchema = FEATURES) -> tuple[list[UserSeries], list[GeneratedEvent]]:
    """Build ``config.n_users`` series and the ground-truth event list."""
    cohort, events = [], []
    for u in range(config.n_users):
        s, ev = generate_user(u, config, schema)
        cohort.append(s)
        events.extend(ev)
    stats = cohort_stats(cohort, events)
    logger.info("generated %d users, %d days, %d events (ratio %.4f)", config.n_users, stats["n_days"], stats["n_events"], stats["anomaly_ratio"])
    return cohort, events


def cohort_stats(cohort: Sequence[UserSeries], events: Sequence[GeneratedEvent]) -> dict:
    n_days = int(sum(s.T for s in cohort))
    n_rare = int(sum(int((s.rare_label == 1).sum()) for s in cohort))
    n_missing = int(sum(int((~s.mask.any(axis=1)).sum()) for s in cohort))
    return {
        "n_users": len(cohort),
        "n_days": n_days,
        "n_events": len(events),
        "n_rare_days": n_rare,
        "anomaly_ratio": n_rare / n_days if n_days else 0.0,
        "missing_day_fraction": n_missing / n_days if n_days else 0.0,
        "events_per_type": dict(sorted(Counter(e.profile.type for e in events).items())),
        "events_per_valence": dict(sorted(Counter(e.profile.valence for e in events).items())),
    }


def metadata(config: CohortConfig, cohort: Sequence[UserSeries], events: Sequence[GeneratedEvent], schema: FeatureSchema = FEATURES) -> dict:
    return {
        "format_version": 1,
        "config": config.to_dict(),
        "stats": cohort_stats(cohort, events),
        "events": [
            {
                "user_id": e.user_id,
                "day_index": e.day_index,
                "type": e.profile.type,
                "valence": e.profile.valence,
                "perf_label": PERF_NAMES[e.profile.perf_label],
                "duration": e.profile.duration,
                "affected": [schema.names[j] for j in e.profile.affected],
                "shifts_sd": [round(v, 6) for v in e.profile.shifts],
            }
            for e in events
        ],
    }


def write_metadata(path: str | Path, meta: dict) -> None:
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


__all__ = [
    "CohortConfig",
    "EventProfile",
    "GeneratedEvent",
    "cohort_stats",
    "effect_curve",
    "generate_cohort",
    "inject_missingness",
    "label_signatures",
    "make_profile",
    "metadata",
    "write_metadata",
]

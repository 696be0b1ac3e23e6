"""Isolation Forest on per-day feature vectors.

Trees are stored as flat arrays (feature, split, left, right, size) so that
scoring walks all points through a tree with vectorized indexing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from rarelife.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329
_EXACT_HARMONIC_MAX = 64


def harmonic(n: int) -> float:
    """H(n): exact sum up to 64 terms, ln(n) + Euler-Mascheroni beyond."""
    if n <= 0:
        return 0.0
    if n <= _EXACT_HARMONIC_MAX:
        return math.fsum(1.0 / k for k in range(1, n + 1))
    return math.log(n) + EULER_GAMMA


def average_path_length(n: int) -> float:
    """Expected unsuccessful-search path length c(n) in a random BST."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


@dataclass
class IsolationTree:
    feature: np.ndarray  # -1 marks an external node
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray
    height_limit: int
    leaf_adjust: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        # depth + c(size) is the path length credited to a point ending here
        self.leaf_adjust = np.array([average_path_length(int(s)) for s in self.size])

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def path_length(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=int)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] < self.split[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return self.depth[node] + self.leaf_adjust[node]


def build_tree(X: np.ndarray, rng: np.random.Generator, height_limit: int) -> IsolationTree:
    feature, split, left, right, size, depth = [], [], [], [], [], []

    def new_node(n, d):
        feature.append(-1)
        split.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(d)
        return len(feature) - 1

    stack = [(np.arange(len(X)), 0, new_node(len(X), 0))]
    while stack:
        rows, d, nid = stack.pop()
        if d >= height_limit or len(rows) <= 1:
            continue
        sub = X[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if candidates.size == 0:
            continue
        q = int(candidates[rng.integers(candidates.size)])
        p = float(rng.uniform(lo[q], hi[q]))
        if p <= lo[q]:
            p = float(np.nextafter(lo[q], hi[q]))
        mask = sub[:, q] < p
        feature[nid] = q
        split[nid] = p
        li = new_node(int(mask.sum()), d + 1)
        ri = new_node(int((~mask).sum()), d + 1)
        left[nid] = li
        right[nid] = ri
        stack.append((rows[~mask], d + 1, ri))
        stack.append((rows[mask], d + 1, li))
    return IsolationTree(
        np.array(feature, dtype=int),
        np.array(split),
        np.array(left, dtype=int),
        np.array(right, dtype=int),
        np.array(size, dtype=int),
        np.array(depth, dtype=float),
        height_limit,
    )


@dataclass
class IsolationForestModel:
    trees: list[IsolationTree] = field(default_factory=list)
    subsample: int = 256
    contamination: float = 0.02
    threshold: float = float("nan")

    def __post_init__(self):
        if not 0 < self.contamination < 0.5:
            raise ConfigError(f"contamination must be in (0, 0.5), got {self.contamination}")

    def score(self, X: np.ndarray) -> np.ndarray:
        """Anomaly score ``2 ** (-E[h(x)] / c(subsample))`` in (0, 1)."""
        if not self.trees:
            raise DataError("isolation forest is not fitted")
        X = np.asarray(X, dtype=float)
        mean_h = np.mean([t.path_length(X) for t in self.trees], axis=0)
        return 2.0 ** (-mean_h / average_path_length(self.subsample))


def iforest_fit(
    points: np.ndarray,
    seed: int = 0,
    n_estimators: int = 200,
    subsample: int = 256,
    contamination: float = 0.02,
) -> IsolationForestModel:
    """Fit a forest and set the threshold at the (1 - contamination) quantile
    of the training scores."""
    X = np.asarray(points, dtype=float)
    if X.ndim != 2 or len(X) < 2:
        raise DataError(f"need a 2-D array with at least 2 rows, got shape {X.shape}")
    psi = subsample
    if len(X) < subsample:
        logger.info("only %d points; subsample reduced from %d", len(X), subsample)
        psi = len(X)
    height_limit = int(math.ceil(math.log2(psi)))
    seeds = np.random.SeedSequence(seed).spawn(n_estimators)
    trees = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        rows = rng.choice(len(X), size=psi, replace=False)
        trees.append(build_tree(X[rows], rng, height_limit))
    model = IsolationForestModel(trees, psi, contamination)
    model.threshold = float(np.quantile(model.score(X), 1.0 - contamination))
    return model


def iforest_detect(model: IsolationForestModel, points: np.ndarray) -> np.ndarray:
    return (model.score(points) > model.threshold).astype(int)

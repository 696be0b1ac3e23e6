"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Any, Protocol

import numpy as np


class Differentiable(Protocol):
    params: dict[str, np.ndarray]

    def loss(self, batch: Any) -> float: ...

    def loss_and_grads(self, batch: Any) -> tuple[float, dict[str, np.ndarray]]: ...


def grad_check(
    model: Differentiable,
    batch: Any,
    step: float = 1e-4,
    n_checks: int = 200,
    seed: int = 0,
    corrupt: dict[str, float] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Entries are sampled so that every parameter tensor is probed at least
    once, then the remainder is drawn uniformly over all entries.

    Args:
        model: Object exposing ``params``, ``loss`` and ``loss_and_grads``.
        batch: Passed through unchanged; must make the loss deterministic
            (fixed dropout masks, no sampling).
        step: Central-difference half width.
        n_checks: Number of scalar entries compared (at least).
        seed: Seed for choosing entries.
        corrupt: Optional ``{param_name: factor}`` applied to the analytic
            gradient before comparison, used to confirm the check can fail.
    """
    rng = np.random.default_rng(seed)
    _, grads = model.loss_and_grads(batch)
    if corrupt:
        grads = {k: g * corrupt.get(k, 1.0) for k, g in grads.items()}
    names = sorted(model.params)
    sizes = np.array([model.params[n].size for n in names])
    picks = [(n, int(rng.integers(model.params[n].size))) for n in names]
    total = int(sizes.sum())
    for flat in rng.choice(total, size=max(n_checks - len(picks), 0), replace=total < n_checks):
        k = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        picks.append((names[k], int(flat - (sizes[:k].sum() if k else 0))))

    worst = 0.0
    for name, idx in picks:
        p = model.params[name].reshape(-1)
        orig = p[idx]
        p[idx] = orig + step
        up = model.loss(batch)
        p[idx] = orig - step
        down = model.loss(batch)
        p[idx] = orig
        g_num = (up - down) / (2.0 * step)
        g_ana = float(grads[name].reshape(-1)[idx])
        rel = abs(g_ana - g_num) / max(abs(g_ana) + abs(g_num), 1e-8)
        worst = max(worst, rel)
    return worst

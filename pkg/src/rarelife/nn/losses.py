"""Losses for the reconstruction and sequence-prediction heads."""

from __future__ import annotations

import numpy as np

LOG_EPS = 1e-12


def reconstruction_loss(W: np.ndarray, W_hat: np.ndarray) -> float:
    """Mean squared error over every cell of an (l, m) window."""
    W = np.asarray(W, dtype=float)
    W_hat = np.asarray(W_hat, dtype=float)
    if W.shape != W_hat.shape:
        raise ValueError(f"shape mismatch: {W.shape} vs {W_hat.shape}")
    return float(np.sum((W - W_hat) ** 2) / W.size)


def weighted_cross_entropy(Y: np.ndarray, Y_hat: np.ndarray, w: np.ndarray) -> float:
    """Class-weighted categorical cross-entropy summed over days.

    Args:
        Y: One-hot targets, shape (l, c).
        Y_hat: Predicted probabilities, shape (l, c); rows must sum to 1.
        w: Per-class weights, length c.
    """
    Y = np.asarray(Y, dtype=float)
    Y_hat = np.asarray(Y_hat, dtype=float)
    w = np.asarray(w, dtype=float)
    if Y.shape != Y_hat.shape or Y.shape[-1] != w.shape[0]:
        raise ValueError(f"shape mismatch: Y {Y.shape}, Y_hat {Y_hat.shape}, w {w.shape}")
    if np.any(Y_hat < 0) or not np.allclose(Y_hat.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError("Y_hat rows must be probability vectors")
    if not (np.isin(Y, (0.0, 1.0)).all() and np.all(Y.sum(axis=-1) == 1)):
        raise ValueError("Y must be one-hot")
    return float(-np.sum(Y * np.log(Y_hat + LOG_EPS) * w))


def batch_reconstruction(X: np.ndarray, X_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample reconstruction loss and its gradient w.r.t. ``X_hat``.

    The gradient is for the per-sample losses summed, so the caller divides
    by the batch size when averaging.
    """
    diff = X_hat - X
    per_cell = diff[0].size
    losses = np.einsum("bij,bij->b", diff, diff) / per_cell
    return losses, 2.0 * diff / per_cell


def batch_weighted_ce(labels: np.ndarray, probs: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample weighted cross-entropy and its gradient w.r.t. the logits.

    Args:
        labels: Integer class codes, shape (B, l).
        probs: Softmax outputs, shape (B, l, c).
        w: Per-class weights, length c.
    """
    B, L, C = probs.shape
    p_true = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    wy = w[labels]
    losses = -np.sum(wy * np.log(p_true + LOG_EPS), axis=1)
    # d/dz_k of -w ln(p_y + eps) = -w * p_y * (1[k=y] - p_k) / (p_y + eps)
    coef = (wy * p_true / (p_true + LOG_EPS))[..., None]
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    dlogits = coef * (probs - onehot)
    return losses, dlogits


def class_weights(labels, n_classes: int) -> np.ndarray:
    """Balanced weights ``n_total / (n_classes * n_j)``; absent classes get 1."""
    labels = np.asarray(labels, dtype=int).ravel()
    if labels.size == 0:
        raise ValueError("class_weights needs at least one label")
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    w = np.ones(n_classes)
    present = counts > 0
    w[present] = labels.size / (n_classes * counts[present])
    return w

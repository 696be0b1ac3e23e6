"""Recurrent and dense layers with hand-written backward passes.

Layers are stateless with respect to a single call: ``forward`` returns the
output together with a cache object, and ``backward`` consumes that cache.
Parameters live in a plain ``params`` dict so an optimizer can address them
by name.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rarelife.errors import NumericalError

ACTIVATIONS = ("tanh", "relu")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows.
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def recurrent_dropout_mask(
    rng: np.random.Generator, batch: int, hidden: int, rate: float, dtype=np.float64
) -> np.ndarray | None:
    """Per-sequence inverted-dropout mask for the recurrent input.

    Returns ``None`` when ``rate`` is zero so callers can skip the multiply.
    """
    if rate <= 0.0:
        return None
    keep = rng.random((batch, hidden)) >= rate
    return keep.astype(dtype) / (1.0 - rate)


@dataclass
class LstmCache:
    x: np.ndarray
    mask: np.ndarray | None
    h: np.ndarray  # (T+1, B, H) time-major, h[0] is the initial state
    c: np.ndarray  # (T+1, B, H)
    gates: np.ndarray  # (T, B, 4H) post-nonlinearity i, f, g, o
    act_c: np.ndarray  # (T, B, H)
    return_sequences: bool
    repeated: bool


class LstmLayer:
    """Single LSTM layer with gate order (input, forget, candidate, output).

    Args:
        input_dim: Size of each input vector.
        hidden_dim: Number of units.
        rng: Generator used for weight initialization.
        recurrent_dropout: Drop rate applied to the recurrent input during
            training. The caller draws the mask (see
            :func:`recurrent_dropout_mask`) and passes it to ``forward``.
        activation: Nonlinearity for the candidate and the cell output.
    """

    def __init__(
        self,
        input_dim: int,
        hidden_dim: int,
        rng: np.random.Generator,
        recurrent_dropout: float = 0.0,
        activation: str = "tanh",
        dtype=np.float64,
    ):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not 0.0 <= recurrent_dropout < 1.0:
            raise ValueError(f"recurrent_dropout must be in [0, 1), got {recurrent_dropout}")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.recurrent_dropout = recurrent_dropout
        self.activation = activation
        H = hidden_dim
        b = np.zeros(4 * H, dtype=dtype)
        b[H : 2 * H] = 1.0
        self.params = {
            "Wx": glorot_uniform(rng, input_dim, 4 * H, dtype),
            "Wh": glorot_uniform(rng, H, 4 * H, dtype),
            "b": b,
        }

    def forward(
        self,
        x: np.ndarray,
        return_sequences: bool = False,
        dropout_mask: np.ndarray | None = None,
        steps: int | None = None,
    ) -> tuple[np.ndarray, LstmCache]:
        """Run the recurrence.

        ``x`` is either a (batch, steps, input_dim) sequence or, when
        ``steps`` is given, a (batch, input_dim) vector fed at every step
        (equivalent to a repeat-vector input, but cheaper).

        Returns the last hidden state (batch, hidden) or, with
        ``return_sequences``, all hidden states (batch, steps, hidden).
        """
        repeated = steps is not None
        if repeated:
            if x.ndim != 2 or steps < 1:
                raise ValueError(f"repeated input must be (batch, features) with steps >= 1, got {x.shape}")
            T = steps
        else:
            if x.ndim != 3 or x.shape[1] == 0:
                raise ValueError(f"expected a non-empty (batch, steps, features) array, got shape {x.shape}")
            T = x.shape[1]
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input_dim={self.input_dim}, got {x.shape[-1]}")
        Wx, Wh, bias = self.params["Wx"], self.params["Wh"], self.params["b"]
        B = x.shape[0]
        H = self.hidden_dim
        dtype = Wx.dtype
        if repeated:
            xw_const = x @ Wx + bias
        else:
            xw = (x.reshape(B * T, -1) @ Wx).reshape(B, T, 4 * H).transpose(1, 0, 2) + bias
        h = np.zeros((T + 1, B, H), dtype=dtype)
        c = np.zeros((T + 1, B, H), dtype=dtype)
        gates = np.empty((T, B, 4 * H), dtype=dtype)
        act_c = np.empty((T, B, H), dtype=dtype)
        act = _act_fn(self.activation)
        for t in range(T):
            h_prev = h[t] if dropout_mask is None else h[t] * dropout_mask
            a = h_prev @ Wh
            a += xw_const if repeated else xw[t]
            g4 = gates[t]
            # sigmoid(a) = 0.5 * (1 + tanh(a / 2)); overwritten for the candidate below
            np.multiply(a, 0.5, out=g4)
            np.tanh(g4, out=g4)
            g4 *= 0.5
            g4 += 0.5
            act(a[:, 2 * H : 3 * H], out=g4[:, 2 * H : 3 * H])
            ct = c[t + 1]
            np.multiply(g4[:, H : 2 * H], c[t], out=ct)
            ct += g4[:, :H] * g4[:, 2 * H : 3 * H]
            act(ct, out=act_c[t])
            np.multiply(g4[:, 3 * H :], act_c[t], out=h[t + 1])
        if not np.isfinite(h[T]).all() or not np.isfinite(c[T]).all():
            raise NumericalError("LSTM produced non-finite hidden states")
        cache = LstmCache(x, dropout_mask, h, c, gates, act_c, return_sequences, repeated)
        out = h[1:].transpose(1, 0, 2) if return_sequences else h[T]
        return out, cache

    def backward(self, dout: np.ndarray, cache: LstmCache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Backpropagate through time.

        ``dout`` matches the forward output shape. Returns the gradient with
        respect to the input (sequence, or vector for repeated input) and a
        dict of parameter gradients.
        """
        Wx, Wh = self.params["Wx"], self.params["Wh"]
        x, mask = cache.x, cache.mask
        T, B, _ = cache.gates.shape
        H = self.hidden_dim
        dtype = Wx.dtype
        dA = np.empty((T, B, 4 * H), dtype=dtype)
        dh_next = np.zeros((B, H), dtype=dtype)
        dc_next = np.zeros((B, H), dtype=dtype)
        tanh = self.activation == "tanh"
        douts = dout.transpose(1, 0, 2) if cache.return_sequences else None
        for t in reversed(range(T)):
            if douts is not None:
                dh = douts[t] + dh_next
            elif t == T - 1:
                dh = dout + dh_next
            else:
                dh = dh_next
            g4 = cache.gates[t]
            i, f, g, o = g4[:, :H], g4[:, H : 2 * H], g4[:, 2 * H : 3 * H], g4[:, 3 * H :]
            ac = cache.act_c[t]
            dac = dh * o
            if tanh:
                dc = dac * (1.0 - ac * ac)
            else:
                dc = dac * (ac > 0)
            dc += dc_next
            da = dA[t]
            sig_i = i * (1.0 - i)
            np.multiply(dc * g, sig_i, out=da[:, :H])
            np.multiply(dc * cache.c[t], f * (1.0 - f), out=da[:, H : 2 * H])
            if tanh:
                np.multiply(dc * i, 1.0 - g * g, out=da[:, 2 * H : 3 * H])
            else:
                np.multiply(dc * i, g > 0, out=da[:, 2 * H : 3 * H])
            np.multiply(dh * ac, o * (1.0 - o), out=da[:, 3 * H :])
            dc_next = dc * f
            dh_next = da @ Wh.T
            if mask is not None:
                dh_next *= mask
        dA_flat = dA.reshape(T * B, 4 * H)
        h_prev = cache.h[:T] if mask is None else cache.h[:T] * mask
        grads = {"Wh": h_prev.reshape(T * B, H).T @ dA_flat}
        if cache.repeated:
            dA_sum = dA.sum(axis=0)
            grads["Wx"] = x.T @ dA_sum
            grads["b"] = dA_sum.sum(axis=0)
            dx = dA_sum @ Wx.T
        else:
            dA_bt = dA.transpose(1, 0, 2).reshape(B * T, 4 * H)
            grads["Wx"] = x.reshape(B * T, -1).T @ dA_bt
            grads["b"] = dA_flat.sum(axis=0)
            dx = (dA_bt @ Wx.T).reshape(B, T, -1)
        return dx, grads


def _act_fn(name: str):
    if name == "tanh":
        return np.tanh
    return lambda x, out: np.maximum(x, 0.0, out=out)


@dataclass
class DenseCache:
    x: np.ndarray


class DenseLayer:
    """Affine map applied over the last axis.

    ``activation`` is ``"linear"`` or ``"softmax"``. For softmax heads the
    backward pass expects the gradient with respect to the logits, which the
    loss functions in :mod:`rarelife.nn.losses` supply directly.
    """

    def __init__(self, input_dim: int, units: int, rng: np.random.Generator, activation: str = "linear", dtype=np.float64):
        if activation not in ("linear", "softmax"):
            raise ValueError(f"unknown activation {activation!r}")
        self.input_dim = input_dim
        self.units = units
        self.activation = activation
        self.params = {
            "W": glorot_uniform(rng, input_dim, units, dtype),
            "b": np.zeros(units, dtype=dtype),
        }

    def logits(self, x: np.ndarray) -> tuple[np.ndarray, DenseCache]:
        return x @ self.params["W"] + self.params["b"], DenseCache(x)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, DenseCache]:
        z, cache = self.logits(x)
        if self.activation == "softmax":
            z = softmax(z)
        return z, cache

    def backward(self, dz: np.ndarray, cache: DenseCache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        x = cache.x
        x2 = x.reshape(-1, x.shape[-1])
        dz2 = dz.reshape(-1, dz.shape[-1])
        grads = {"W": x2.T @ dz2, "b": dz2.sum(axis=0)}
        return dz @ self.params["W"].T, grads


def repeat_vector(z: np.ndarray, n: int) -> np.ndarray:
    """Copy a (batch, features) array ``n`` times along a new time axis."""
    return np.repeat(z[:, None, :], n, axis=1)


def repeat_vector_backward(d: np.ndarray) -> np.ndarray:
    return d.sum(axis=1)

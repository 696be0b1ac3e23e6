"""Multi-task recurrent autoencoder for exact-day rare-event detection.

A shared LSTM encoder compresses a window into a latent vector that feeds two
heads: an LSTM decoder reconstructing the window, and an LSTM sequence
predictor classifying each day's workplace-performance label. At inference the
last-day reconstruction error is divided by a scaling factor derived from
predicted label transitions, so windows whose predicted labels change get
magnified scores.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from rarelife.errors import ConfigError, DataError, NumericalError
from rarelife.nn.checkpoint import load_checkpoint, save_checkpoint
from rarelife.nn.layers import (
    DenseLayer,
    LstmLayer,
    recurrent_dropout_mask,
    softmax,
)
from rarelife.nn.losses import batch_reconstruction, batch_weighted_ce, class_weights
from rarelife.nn.optim import AdamState
from rarelife.timeseries import N_CLASSES, WindowSet

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 2.0


@dataclass
class MtadConfig:
    window: int = 10
    n_features: int = 29
    n_classes: int = N_CLASSES
    hidden: int = 100
    encoder_dropout: float = 0.2
    predictor_dropout: float = 0.2
    activation: str = "tanh"
    use_predictor: bool = True
    epochs: int = 500
    batch_size: int = 128
    lr: float = 1e-4
    patience: int = 10
    val_floor: float = 0.2
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError(f"window must be >= 2, got {self.window}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype}")
        if self.batch_size < 1 or self.epochs < 1 or self.hidden < 1:
            raise ConfigError("batch_size, epochs and hidden must be positive")


@dataclass
class Batch:
    X: np.ndarray
    labels: np.ndarray | None = None
    class_w: np.ndarray | None = None
    enc_mask: np.ndarray | None = None
    pred_mask: np.ndarray | None = None


class MtadModel:
    """Encoder, decoder and (optionally) predictor with joint backward pass.

    With ``config.use_predictor = False`` the predictor is not built and the
    model reduces to the plain LSTM encoder-decoder.
    """

    def __init__(self, config: MtadConfig | None = None):
        self.config = config or MtadConfig()
        cfg = self.config
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
        H = cfg.hidden
        self.encoder = LstmLayer(cfg.n_features, H, rng, cfg.encoder_dropout, cfg.activation, dtype)
        self.decoder = LstmLayer(H, H, rng, 0.0, cfg.activation, dtype)
        self.decoder_head = DenseLayer(H, cfg.n_features, rng, "linear", dtype)
        self.layers = {"encoder": self.encoder, "decoder": self.decoder, "decoder_head": self.decoder_head}
        if cfg.use_predictor:
            self.predictor = LstmLayer(H, H, rng, cfg.predictor_dropout, cfg.activation, dtype)
            self.predictor_head = DenseLayer(H, cfg.n_classes, rng, "softmax", dtype)
            self.layers["predictor"] = self.predictor
            self.layers["predictor_head"] = self.predictor_head
        self.params = {f"{ln}.{pn}": p for ln, layer in self.layers.items() for pn, p in layer.params.items()}

    # -- forward / backward --------------------------------------------------

    def _forward(self, batch: Batch):
        X = batch.X.astype(self.config.dtype, copy=False)
        l = X.shape[1]
        Z, enc_cache = self.encoder.forward(X, dropout_mask=batch.enc_mask)
        # Decoder and predictor see Z repeated l times; the layers take the
        # repeated input directly.
        dec_h, dec_cache = self.decoder.forward(Z, return_sequences=True, steps=l)
        X_hat, head_cache = self.decoder_head.forward(dec_h)
        caches = {"encoder": enc_cache, "decoder": dec_cache, "decoder_head": head_cache}
        probs = None
        if self.config.use_predictor:
            pred_h, pred_cache = self.predictor.forward(Z, return_sequences=True, dropout_mask=batch.pred_mask, steps=l)
            logits, ph_cache = self.predictor_head.logits(pred_h)
            probs = softmax(logits)
            caches["predictor"] = pred_cache
            caches["predictor_head"] = ph_cache
        return X_hat, probs, caches

    def predict(self, X: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray | None]:
        """Reconstructions and class probabilities without dropout."""
        outs, probs = [], []
        for s in range(0, len(X), chunk):
            X_hat, p, _ = self._forward(Batch(X[s : s + chunk]))
            outs.append(X_hat)
            probs.append(p)
        X_hat = np.concatenate(outs) if outs else np.empty((0,) + X.shape[1:])
        P = np.concatenate(probs) if self.config.use_predictor and probs else None
        return X_hat, P

    def loss_parts(self, batch: Batch) -> tuple[float, float, float]:
        """Batch-mean total, reconstruction and prediction losses."""
        X_hat, probs, _ = self._forward(batch)
        la, _ = batch_reconstruction(batch.X, X_hat)
        lb = 0.0
        if probs is not None:
            lbs, _ = batch_weighted_ce(batch.labels, probs, self._class_w(batch))
            lb = float(lbs.mean())
        return float(la.mean()) + lb, float(la.mean()), lb

    def loss(self, batch: Batch) -> float:
        return self.loss_parts(batch)[0]

    def _class_w(self, batch: Batch) -> np.ndarray:
        if batch.class_w is None:
            return np.ones(self.config.n_classes)
        return batch.class_w

    def loss_and_grads(self, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
        loss, grads, _ = self._loss_and_grads(batch)
        return loss, grads

    def _loss_and_grads(self, batch: Batch):
        B = len(batch.X)
        X_hat, probs, caches = self._forward(batch)
        la, dX_hat = batch_reconstruction(batch.X, X_hat)
        grads: dict[str, np.ndarray] = {}

        def collect(name, g):
            for k, v in g.items():
                grads[f"{name}.{k}"] = v

        d_dec_h, g = self.decoder_head.backward(dX_hat / B, caches["decoder_head"])
        collect("decoder_head", g)
        dZ, g = self.decoder.backward(d_dec_h, caches["decoder"])
        collect("decoder", g)
        lb = np.zeros(B)
        if probs is not None:
            lb, dlogits = batch_weighted_ce(batch.labels, probs, self._class_w(batch))
            d_pred_h, g = self.predictor_head.backward(dlogits / B, caches["predictor_head"])
            collect("predictor_head", g)
            dZp, g = self.predictor.backward(d_pred_h, caches["predictor"])
            collect("predictor", g)
            dZ = dZ + dZp
        _, g = self.encoder.backward(dZ, caches["encoder"])
        collect("encoder", g)
        total = float(la.mean() + lb.mean())
        return total, grads, (float(la.mean()), float(lb.mean()))

    def draw_masks(self, rng: np.random.Generator, batch_size: int) -> tuple[np.ndarray | None, np.ndarray | None]:
        cfg = self.config
        dtype = np.dtype(cfg.dtype)
        enc = recurrent_dropout_mask(rng, batch_size, cfg.hidden, cfg.encoder_dropout, dtype)
        pred = None
        if cfg.use_predictor:
            pred = recurrent_dropout_mask(rng, batch_size, cfg.hidden, cfg.predictor_dropout, dtype)
        return enc, pred

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.params, {"config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> MtadModel:
        params, meta = load_checkpoint(path)
        model = cls(MtadConfig(**meta["config"]))
        if set(params) != set(model.params):
            raise DataError(f"{path}: parameter names do not match the configured model")
        for k, v in params.items():
            model.params[k][...] = v
        return model


# -- training ------------------------------------------------------------------


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_loss_a: list[float] = field(default_factory=list)
    train_loss_b: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_loss_a: list[float] = field(default_factory=list)
    val_loss_b: list[float] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    initial_train_loss: float = float("nan")

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


def _evaluate(model: MtadModel, ws: WindowSet, class_w: np.ndarray, chunk: int = 1024) -> tuple[float, float, float]:
    tot = np.zeros(3)
    for s in range(0, len(ws), chunk):
        part = ws.subset(slice(s, s + chunk))
        parts = model.loss_parts(Batch(part.X, part.perf, class_w))
        tot += np.array(parts) * len(part)
    tot /= len(ws)
    return float(tot[0]), float(tot[1]), float(tot[2])


def train(
    model: MtadModel,
    train_set: WindowSet,
    val_set: WindowSet,
    class_w: np.ndarray | None = None,
) -> tuple[MtadModel, TrainReport]:
    """Mini-batch Adam on the joint loss with early stopping.

    Stops at ``config.epochs``, after ``config.patience`` epochs with no
    improvement of the validation loss, or once the validation loss drops to
    ``config.val_floor``. The weights from the best validation epoch are
    restored before returning.
    """
    cfg = model.config
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation sets must be non-empty")
    if np.any(train_set.rare == 1):
        raise DataError(f"training set contains {int(train_set.rare.sum())} rare windows; only normal windows may be used")
    if train_set.window != cfg.window:
        raise ConfigError(f"window length {train_set.window} does not match config.window={cfg.window}")
    if not (np.all(np.isfinite(train_set.X)) and np.all(np.isfinite(val_set.X))):
        raise DataError("windows contain non-finite values; impute before training")
    if class_w is None:
        class_w = class_weights(train_set.perf, cfg.n_classes)
    class_w = np.asarray(class_w, dtype=float)

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    opt = AdamState(lr=cfg.lr)
    report = TrainReport()
    report.initial_train_loss = _evaluate(model, train_set, class_w)[0]
    best = np.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    since_best = 0
    N = len(train_set)
    for epoch in range(cfg.epochs):
        order = rng.permutation(N)
        sums = np.zeros(3)
        for s in range(0, N, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            enc_mask, pred_mask = model.draw_masks(rng, len(idx))
            batch = Batch(train_set.X[idx], train_set.perf[idx], class_w, enc_mask, pred_mask)
            loss, grads, (la, lb) = model._loss_and_grads(batch)
            opt.update(model.params, grads)
            sums += np.array([loss, la, lb]) * len(idx)
        sums /= N
        report.train_loss.append(float(sums[0]))
        report.train_loss_a.append(float(sums[1]))
        report.train_loss_b.append(float(sums[2]))
        v, va, vb = _evaluate(model, val_set, class_w)
        if not (np.isfinite(sums[0]) and np.isfinite(v)):
            raise NumericalError(f"training diverged at epoch {epoch}: train loss {sums[0]}, validation loss {v}")
        report.val_loss.append(v)
        report.val_loss_a.append(va)
        report.val_loss_b.append(vb)
        if v < best:
            best = v
            report.best_epoch = epoch
            since_best = 0
            for k, p in model.params.items():
                best_params[k][...] = p
        else:
            since_best += 1
        logger.debug("epoch %d train %.4f val %.4f", epoch, sums[0], v)
        if v <= cfg.val_floor:
            report.stop_reason = "val_floor"
            break
        if since_best >= cfg.patience:
            report.stop_reason = "patience"
            break
    else:
        report.stop_reason = "max_epochs"
    for k, p in model.params.items():
        p[...] = best_params[k]
    logger.info(
        "trained %s for %d epochs (%s), best val %.4f at epoch %d",
        "MTAD" if cfg.use_predictor else "LSTM-ED",
        report.epochs_run,
        report.stop_reason,
        best,
        report.best_epoch,
    )
    return model, report


# -- scoring ---------------------------------------------------------------------


def anomaly_score(W: np.ndarray, W_hat: np.ndarray) -> float:
    """Mean squared reconstruction error of the most recent day only."""
    W = np.asarray(W, dtype=float)
    W_hat = np.asarray(W_hat, dtype=float)
    if W.shape != W_hat.shape or W.ndim != 2:
        raise ValueError(f"shape mismatch: {W.shape} vs {W_hat.shape}")
    return float(np.mean((W[-1] - W_hat[-1]) ** 2))


def transition_vector(y_hat) -> np.ndarray:
    """1 where the predicted label differs from the previous day's."""
    y_hat = np.asarray(y_hat)
    if y_hat.shape[-1] < 2:
        raise ValueError("need at least two days to form transitions")
    return (y_hat[..., 1:] != y_hat[..., :-1]).astype(int)


def scaling_factor(r, lam: float = DEFAULT_LAMBDA) -> np.ndarray | float:
    """Mean of ``exp(-lam * t * r_t)`` over positions ``t = 1 .. l-1``.

    Accepts a single transition vector or a stack of them (last axis).
    """
    if lam <= 0:
        raise ValueError(f"decay constant must be positive, got {lam}")
    r = np.asarray(r, dtype=float)
    t = np.arange(1, r.shape[-1] + 1)
    s = np.mean(np.exp(-lam * t * r), axis=-1)
    return float(s) if np.ndim(s) == 0 else s


@dataclass
class ScoreTable:
    """Per-window scores; ``r`` is (N, l-1) and ``y_hat`` is (N, l)."""

    alpha: np.ndarray
    y_hat: np.ndarray | None
    r: np.ndarray
    s: np.ndarray
    delta: np.ndarray


def score_windows(model: MtadModel, ws: WindowSet, lam: float = DEFAULT_LAMBDA) -> ScoreTable:
    """Reconstruct, predict and scale every window in ``ws``."""
    X_hat, probs = model.predict(ws.X)
    alpha = np.mean((ws.X[:, -1, :] - X_hat[:, -1, :]) ** 2, axis=1)
    if probs is None:
        y_hat = None
        r = np.zeros((len(ws), ws.window - 1), dtype=int)
    else:
        y_hat = np.argmax(probs, axis=-1)
        r = transition_vector(y_hat)
    s = np.asarray(scaling_factor(r, lam)).reshape(len(ws))
    return ScoreTable(alpha, y_hat, r, s, alpha / s)


def rescale(scores: ScoreTable, lam: float) -> ScoreTable:
    """Recompute ``s`` and ``delta`` for a new decay constant."""
    s = np.asarray(scaling_factor(scores.r, lam)).reshape(len(scores.alpha))
    return ScoreTable(scores.alpha, scores.y_hat, scores.r, s, scores.alpha / s)


# -- thresholds and detection ---------------------------------------------------------


@dataclass
class ThresholdSet:
    gamma: float
    per_user: dict[str, float] = field(default_factory=dict)
    percentile: float = 95.0
    statistic: str = "delta"
    fallback_users: list[str] = field(default_factory=list)

    def for_user(self, user: str, personalized: bool) -> float:
        if personalized:
            return self.per_user.get(user, self.gamma)
        return self.gamma


def thresholds_from_scores(
    values: np.ndarray,
    users: np.ndarray,
    percentile: float = 95.0,
    per_user: bool = False,
    min_user_windows: int = 20,
    statistic: str = "delta",
) -> ThresholdSet:
    """Percentile thresholds (linear interpolation) from validation scores."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DataError("validation set is empty; cannot fit thresholds")
    ts = ThresholdSet(float(np.percentile(values, percentile)), percentile=percentile, statistic=statistic)
    if per_user:
        for u in sorted(set(users.tolist())):
            v = values[users == u]
            if len(v) >= min_user_windows:
                ts.per_user[u] = float(np.percentile(v, percentile))
            else:
                ts.fallback_users.append(u)
        if ts.fallback_users:
            logger.info("%d users below %d validation windows use the global threshold", len(ts.fallback_users), min_user_windows)
    return ts


def fit_thresholds(
    model: MtadModel,
    val_set: WindowSet,
    percentile: float = 95.0,
    per_user: bool = False,
    lam: float = DEFAULT_LAMBDA,
    min_user_windows: int = 20,
    statistic: str = "delta",
) -> ThresholdSet:
    """Thresholds from the validation windows' scaled (or raw) scores."""
    if statistic not in ("delta", "alpha"):
        raise ConfigError(f"statistic must be 'delta' or 'alpha', got {statistic!r}")
    if len(val_set) == 0:
        raise DataError("validation set is empty; cannot fit thresholds")
    if np.any(val_set.rare == 1):
        raise DataError("validation set must contain only normal windows")
    scores = score_windows(model, val_set, lam)
    values = scores.delta if statistic == "delta" else scores.alpha
    return thresholds_from_scores(values, val_set.user, percentile, per_user, min_user_windows, statistic)


@dataclass(frozen=True)
class DetectionOutcome:
    user_id: str
    t: int
    alpha: float
    r: tuple[int, ...]
    s: float
    delta: float
    y_hat: tuple[int, ...] | None
    decision: int
    gamma_used: float
    true_label: int = -1


def decide(scores: ScoreTable, users: np.ndarray, thresholds: ThresholdSet, personalized: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Strict ``delta > gamma`` decisions and the threshold used per window."""
    gammas = np.array([thresholds.for_user(u, personalized) for u in users], dtype=float)
    return (scores.delta > gammas).astype(int), gammas


def detect(
    model: MtadModel,
    ws: WindowSet,
    thresholds: ThresholdSet,
    lam: float = DEFAULT_LAMBDA,
    personalized: bool = False,
) -> list[DetectionOutcome]:
    scores = score_windows(model, ws, lam)
    decisions, gammas = decide(scores, ws.user, thresholds, personalized)
    return outcomes_from_scores(ws, scores, decisions, gammas)


def outcomes_from_scores(ws: WindowSet, scores: ScoreTable, decisions: np.ndarray, gammas: np.ndarray) -> list[DetectionOutcome]:
    out = []
    for k in range(len(ws)):
        out.append(
            DetectionOutcome(
                str(ws.user[k]),
                int(ws.t[k]),
                float(scores.alpha[k]),
                tuple(int(v) for v in scores.r[k]),
                float(scores.s[k]),
                float(scores.delta[k]),
                None if scores.y_hat is None else tuple(int(v) for v in scores.y_hat[k]),
                int(decisions[k]),
                float(gammas[k]),
                int(ws.rare[k]),
            )
        )
    return out


def predictor_only_decisions(y_hat: np.ndarray) -> np.ndarray:
    """1 iff the two most recent predicted labels differ."""
    y_hat = np.asarray(y_hat)
    return (y_hat[..., -1] != y_hat[..., -2]).astype(int)


def predictor_only_detect(model: MtadModel, ws: WindowSet) -> np.ndarray:
    if not model.config.use_predictor:
        raise ConfigError("model has no sequence predictor")
    _, probs = model.predict(ws.X)
    return predictor_only_decisions(np.argmax(probs, axis=-1))

"""Comparison methods: LSTM encoder-decoder and Isolation Forest."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from rarelife.iforest import IsolationForestModel, IsolationTree, average_path_length, build_tree, harmonic, iforest_detect, iforest_fit
from rarelife.mtad import MtadConfig, MtadModel, TrainReport, train
from rarelife.timeseries import WindowSet

LSTM_ED_EPOCHS = 300


def lstm_ed_config(base: MtadConfig | None = None, epochs: int = LSTM_ED_EPOCHS) -> MtadConfig:
    """The MTAD encoder/decoder without the sequence predictor."""
    base = base or MtadConfig()
    return replace(base, use_predictor=False, epochs=min(base.epochs, epochs))


def lstm_ed_train(
    train_set: WindowSet,
    val_set: WindowSet,
    config: MtadConfig | None = None,
) -> tuple[MtadModel, TrainReport]:
    """Train the reconstruction-only model; its scores use ``s = 1``."""
    return train(MtadModel(lstm_ed_config(config)), train_set, val_set)


def day_vectors(ws: WindowSet) -> np.ndarray:
    """The normalized feature vector of each window's final day."""
    return ws.X[:, -1, :]


__all__ = [
    "IsolationForestModel",
    "IsolationTree",
    "LSTM_ED_EPOCHS",
    "average_path_length",
    "build_tree",
    "day_vectors",
    "harmonic",
    "iforest_detect",
    "iforest_fit",
    "lstm_ed_config",
    "lstm_ed_train",
]

"""Minimal differentiable building blocks (numpy, explicit backward passes)."""

from rarelife.nn.checkpoint import load_checkpoint, save_checkpoint
from rarelife.nn.gradcheck import grad_check
from rarelife.nn.layers import (
    DenseLayer,
    LstmLayer,
    recurrent_dropout_mask,
    repeat_vector,
    repeat_vector_backward,
    sigmoid,
    softmax,
)
from rarelife.nn.losses import class_weights, reconstruction_loss, weighted_cross_entropy
from rarelife.nn.optim import AdamState

__all__ = [
    "AdamState",
    "DenseLayer",
    "LstmLayer",
    "class_weights",
    "grad_check",
    "load_checkpoint",
    "reconstruction_loss",
    "recurrent_dropout_mask",
    "repeat_vector",
    "repeat_vector_backward",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "weighted_cross_entropy",
]

"""Minimal numpy neural-network engine with manual backpropagation."""

from .checkpoint import load_network, network_from_bytes, network_to_bytes, save_network
from .gradcheck import grad_check
from .layers import (
    BatchNorm1d,
    Conv1d,
    ConvTranspose1d,
    Dense,
    Layer,
    LeakyReLU,
    ShapeError,
)
from .network import (
    AdamState,
    Network,
    Tape,
    TapeError,
    adam_step,
    backward,
    compose,
    forward,
    mse_loss,
    optimizer_step,
)

__all__ = [
    "AdamState",
    "BatchNorm1d",
    "Conv1d",
    "ConvTranspose1d",
    "Dense",
    "Layer",
    "LeakyReLU",
    "Network",
    "ShapeError",
    "Tape",
    "TapeError",
    "adam_step",
    "backward",
    "compose",
    "forward",
    "grad_check",
    "load_network",
    "mse_loss",
    "network_from_bytes",
    "network_to_bytes",
    "optimizer_step",
    "save_network",
]

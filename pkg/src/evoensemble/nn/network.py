"""Sequential network, activation tape, loss and optimizer."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layers import BatchNorm1d, Layer, ShapeError

_ids = itertools.count()


class TapeError(RuntimeError):
    """Backward was called with a tape from another network or parameter state."""


@dataclass
class Tape:
    net_id: int
    version: int
    mode: str
    caches: list
    input_shape: tuple[int, ...]


class Network:
    """An ordered stack of layers with a fixed per-sample input shape."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int]):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        self.output_shape = shape
        self.uid = next(_ids)
        self.version = 0

    @property
    def dtype(self) -> np.dtype:
        for p in self.parameters():
            return p.dtype
        return np.dtype(np.float64)

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for _, p in sorted(layer.params.items())]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def forward(self, x: np.ndarray, mode: str = "eval") -> tuple[np.ndarray, Tape]:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=self.dtype)
        k = len(self.input_shape)
        if x.ndim < k or tuple(x.shape[x.ndim - k :]) != self.input_shape:
            raise ShapeError(
                f"layer 0 ({self.layers[0].kind if self.layers else 'input'}): "
                f"input trailing shape {x.shape[x.ndim - k:]} != {self.input_shape}"
            )
        lead = x.shape[: x.ndim - k]
        h = x.reshape((-1,) + self.input_shape)
        train = mode == "train"
        caches = []
        for layer in self.layers:
            h, cache = layer.forward(h, train)
            caches.append(cache)
        y = h.reshape(lead + self.output_shape)
        return y, Tape(self.uid, self.version, mode, caches, x.shape)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, "eval")[0]

    def backward(self, tape: Tape, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return parameter gradients (ordered as :meth:`parameters`) and the input gradient."""
        if tape.net_id != self.uid or tape.version != self.version:
            raise TapeError("tape does not match this network's current parameters")
        g = np.asarray(grad_out, dtype=self.dtype).reshape((-1,) + self.output_shape)
        per_layer = []
        for layer, cache in zip(reversed(self.layers), reversed(tape.caches)):
            g, grads = layer.backward(cache, g)
            per_layer.append(grads)
        per_layer.reverse()
        flat = [grads[name] for layer, grads in zip(self.layers, per_layer) for name in sorted(layer.params)]
        return flat, g.reshape(tape.input_shape)

    def commit(self, tape: Tape) -> None:
        """Write back batchnorm running statistics gathered by a train-mode forward."""
        if tape.mode != "train":
            return
        for layer, cache in zip(self.layers, tape.caches):
            if isinstance(layer, BatchNorm1d):
                layer.commit(cache)

    def touch(self) -> None:
        """Mark parameters as changed so that outstanding tapes go stale."""
        self.version += 1

    def copy(self) -> "Network":
        import copy

        clone = copy.deepcopy(self)
        clone.uid = next(_ids)
        return clone


def forward(net: Network, x: np.ndarray, mode: str = "eval"):
    return net.forward(x, mode)


def backward(net: Network, tape: Tape, grad_out: np.ndarray):
    return net.backward(tape, grad_out)


def compose(*nets: Network) -> Network:
    """Chain networks into one; layers are shared, not copied."""
    layers = [layer for net in nets for layer in net.layers]
    return Network(layers, nets[0].input_shape)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = diff * (pred.dtype.type(2.0) / diff.size)
    return loss, grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    step_size = state.lr / c1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"parameter {p.shape} / gradient {g.shape} mismatch")
        # in-place with one scratch buffer; same arithmetic as
        # p -= lr/c1 * m / (sqrt(v/c2) + eps)
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        p -= tmp
    return params, state


def optimizer_step(nets: Sequence[Network], grads: list[np.ndarray], state: AdamState) -> None:
    params = [p for net in nets for p in net.parameters()]
    adam_step(params, grads, state)
    for net in nets:
        net.touch()

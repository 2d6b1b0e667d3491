"""Layer kinds with hand-written forward and backward passes.

All tensors are channels-last: a sequence batch has shape ``[batch, length,
channels]``. Each layer exposes ``forward(x, train) -> (y, cache)`` and
``backward(cache, grad_y) -> (grad_x, grads)`` where ``grads`` maps parameter
names to arrays shaped like ``params``.
"""

from __future__ import annotations

from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def resolve_padding(padding, kernel: int) -> tuple[int, int]:
    """``"same"`` puts the odd extra pad on the right."""
    if padding == "same":
        total = kernel - 1
        return total // 2, total - total // 2
    if isinstance(padding, int):
        return padding, padding
    left, right = padding
    return int(left), int(right)


class Layer:
    kind: str = ""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def hyper(self) -> dict[str, Any]:
        return {}

    def forward(self, x: np.ndarray, train: bool):
        raise NotImplementedError

    def backward(self, cache, grad_y: np.ndarray):
        raise NotImplementedError

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.hyper().items())
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    """Affine map over the last axis."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features = int(in_features), int(out_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = _kaiming_uniform(rng, (self.in_features, self.out_features), self.in_features, dtype)
        self.params["bias"] = _kaiming_uniform(rng, (self.out_features,), self.in_features, dtype)

    def hyper(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, in_shape):
        if not in_shape or in_shape[-1] != self.in_features:
            raise ShapeError(f"dense expects trailing dim {self.in_features}, got {in_shape}")
        return in_shape[:-1] + (self.out_features,)

    def forward(self, x, train):
        return x @ self.params["weight"] + self.params["bias"], x

    def backward(self, x, grad_y):
        x2 = x.reshape(-1, self.in_features)
        g2 = grad_y.reshape(-1, self.out_features)
        grads = {"weight": x2.T @ g2, "bias": g2.sum(axis=0)}
        return grad_y @ self.params["weight"].T, grads


class Conv1d(Layer):
    """1-D convolution (cross-correlation); weight shape ``[kernel, c_in, c_out]``."""

    kind = "conv1d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding="same", rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        self.kernel_size, self.stride = int(kernel_size), int(stride)
        self.padding = resolve_padding(padding, self.kernel_size)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = self.in_channels * self.kernel_size
        self.params["weight"] = _kaiming_uniform(
            rng, (self.kernel_size, self.in_channels, self.out_channels), fan_in, dtype
        )
        self.params["bias"] = _kaiming_uniform(rng, (self.out_channels,), fan_in, dtype)

    def hyper(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": list(self.padding),
        }

    def out_length(self, length: int) -> int:
        return (length + sum(self.padding) - self.kernel_size) // self.stride + 1

    def output_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.in_channels:
            raise ShapeError(f"conv1d expects [length, {self.in_channels}], got {in_shape}")
        out_len = self.out_length(in_shape[0])
        if out_len < 1:
            raise ShapeError(f"conv1d kernel {self.kernel_size} too long for input length {in_shape[0]}")
        return (out_len, self.out_channels)

    def forward(self, x, train):
        b, length, _ = x.shape
        pl, pr = self.padding
        xp = np.pad(x, ((0, 0), (pl, pr), (0, 0))) if (pl or pr) else x
        # [b, out_len, c_in, k] -> [b, out_len, k, c_in]
        cols = sliding_window_view(xp, self.kernel_size, axis=1)[:, :: self.stride]
        out_len = cols.shape[1]
        cols = cols.transpose(0, 1, 3, 2).reshape(b * out_len, -1)
        w2 = self.params["weight"].reshape(-1, self.out_channels)
        y = (cols @ w2 + self.params["bias"]).reshape(b, out_len, self.out_channels)
        return y, (cols, x.shape, out_len)

    def backward(self, cache, grad_y):
        cols, (b, length, c_in), out_len = cache
        k, s = self.kernel_size, self.stride
        pl, pr = self.padding
        g2 = grad_y.reshape(-1, self.out_channels)
        w2 = self.params["weight"].reshape(-1, self.out_channels)
        grads = {
            "weight": (cols.T @ g2).reshape(self.params["weight"].shape),
            "bias": g2.sum(axis=0),
        }
        gcols = (g2 @ w2.T).reshape(b, out_len, k, c_in)
        gxp = np.zeros((b, length + pl + pr, c_in), dtype=grad_y.dtype)
        span = s * (out_len - 1) + 1
        for j in range(k):
            gxp[:, j : j + span : s] += gcols[:, :, j]
        return gxp[:, pl : pl + length], grads


class ConvTranspose1d(Layer):
    """Transposed 1-D convolution; weight shape ``[kernel, c_in, c_out]``.

    Output length is ``(L - 1) * stride + kernel - pad_left - pad_right``,
    which inverts :class:`Conv1d` length arithmetic for the same padding.
    """

    kind = "transposed_conv1d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding="same", rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        self.kernel_size, self.stride = int(kernel_size), int(stride)
        self.padding = resolve_padding(padding, self.kernel_size)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = self.in_channels * self.kernel_size
        self.params["weight"] = _kaiming_uniform(
            rng, (self.kernel_size, self.in_channels, self.out_channels), fan_in, dtype
        )
        self.params["bias"] = _kaiming_uniform(rng, (self.out_channels,), fan_in, dtype)

    hyper = Conv1d.hyper

    def out_length(self, length: int) -> int:
        return (length - 1) * self.stride + self.kernel_size - sum(self.padding)

    def output_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.in_channels:
            raise ShapeError(f"transposed_conv1d expects [length, {self.in_channels}], got {in_shape}")
        out_len = self.out_length(in_shape[0])
        if out_len < 1:
            raise ShapeError(f"transposed_conv1d padding {self.padding} leaves no output")
        return (out_len, self.out_channels)

    def _w_in_major(self) -> np.ndarray:
        # [k, c_in, c_out] -> [c_in, k * c_out]
        return self.params["weight"].transpose(1, 0, 2).reshape(self.in_channels, -1)

    def forward(self, x, train):
        b, length, _ = x.shape
        k, s = self.kernel_size, self.stride
        pl, pr = self.padding
        x2 = x.reshape(-1, self.in_channels)
        contrib = (x2 @ self._w_in_major()).reshape(b, length, k, self.out_channels)
        full_len = (length - 1) * s + k
        full = np.zeros((b, full_len, self.out_channels), dtype=contrib.dtype)
        span = s * (length - 1) + 1
        for j in range(k):
            full[:, j : j + span : s] += contrib[:, :, j]
        y = full[:, pl : full_len - pr] + self.params["bias"]
        return y, (x2, x.shape)

    def backward(self, cache, grad_y):
        x2, (b, length, c_in) = cache
        k, s = self.kernel_size, self.stride
        pl, pr = self.padding
        gfull = np.pad(grad_y, ((0, 0), (pl, pr), (0, 0)))
        span = s * (length - 1) + 1
        gcontrib = np.empty((b, length, k, self.out_channels), dtype=grad_y.dtype)
        for j in range(k):
            gcontrib[:, :, j] = gfull[:, j : j + span : s]
        g2 = gcontrib.reshape(b * length, -1)
        gw = (x2.T @ g2).reshape(c_in, k, self.out_channels).transpose(1, 0, 2)
        grads = {
            "weight": np.ascontiguousarray(gw),
            "bias": grad_y.reshape(-1, self.out_channels).sum(axis=0),
        }
        gx = (g2 @ self._w_in_major().T).reshape(b, length, c_in)
        return gx, grads


class BatchNorm1d(Layer):
    """Batch normalisation over every axis but the last (channel) axis.

    Train mode normalises with batch statistics and returns the updated
    running statistics in the cache; they are only written back by
    :meth:`commit`.
    """

    kind = "batchnorm1d"

    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ValueError("batchnorm epsilon must be positive")
        self.num_features, self.eps, self.momentum = int(num_features), float(eps), float(momentum)
        self.params["gamma"] = np.ones(self.num_features, dtype=dtype)
        self.params["beta"] = np.zeros(self.num_features, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(self.num_features, dtype=dtype)
        self.buffers["running_var"] = np.ones(self.num_features, dtype=dtype)

    def hyper(self):
        return {"num_features": self.num_features, "eps": self.eps, "momentum": self.momentum}

    def output_shape(self, in_shape):
        if not in_shape or in_shape[-1] != self.num_features:
            raise ShapeError(f"batchnorm1d expects trailing dim {self.num_features}, got {in_shape}")
        return in_shape

    def forward(self, x, train):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + x.dtype.type(self.eps))
            xhat = (x - self.buffers["running_mean"]) * inv_std
            return gamma * xhat + beta, (None, inv_std, None)
        axes = tuple(range(x.ndim - 1))
        n = x.size // self.num_features
        mean = x.mean(axis=axes)
        centered = x - mean
        var = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
        xhat = centered * inv_std
        m = x.dtype.type(self.momentum)
        unbiased = var * (n / max(n - 1, 1))
        pending = {
            "running_mean": (1 - m) * self.buffers["running_mean"] + m * mean,
            "running_var": (1 - m) * self.buffers["running_var"] + m * unbiased,
        }
        return gamma * xhat + beta, (xhat, inv_std, pending)

    def backward(self, cache, grad_y):
        xhat, inv_std, _ = cache
        gamma = self.params["gamma"]
        if xhat is None:
            # eval-mode statistics are constants
            return grad_y * gamma * inv_std, {
                "gamma": np.zeros_like(gamma),
                "beta": grad_y.reshape(-1, self.num_features).sum(axis=0),
            }
        axes = tuple(range(grad_y.ndim - 1))
        n = grad_y.size // self.num_features
        grads = {"gamma": (grad_y * xhat).sum(axis=axes), "beta": grad_y.sum(axis=axes)}
        gxhat = grad_y * gamma
        gx = (inv_std / n) * (
            n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes)
        )
        return gx, grads

    def commit(self, cache) -> None:
        pending = cache[2]
        if pending is not None:
            self.buffers.update(pending)


class LeakyReLU(Layer):
    kind = "lrelu"

    def __init__(self, negative_slope: float = 0.01):
        super().__init__()
        if not 0.0 < negative_slope < 1.0:
            raise ValueError("negative slope must lie in (0, 1)")
        self.negative_slope = float(negative_slope)

    def hyper(self):
        return {"negative_slope": self.negative_slope}

    def forward(self, x, train):
        scale = np.where(x > 0, x.dtype.type(1.0), x.dtype.type(self.negative_slope))
        return x * scale, scale

    def backward(self, scale, grad_y):
        return grad_y * scale, {}


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Dense, Conv1d, ConvTranspose1d, BatchNorm1d, LeakyReLU)
}

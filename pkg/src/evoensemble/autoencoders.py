"""Submodel families: a 1-D convolutional autoencoder and a USAD-style pair.

Both consume sliding windows ``[n, window, features]`` of min-max scaled data
and score each window by reconstruction error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .dataset import (
    DatasetError,
    NormStats,
    TimeSeries,
    WindowBatch,
    apply_normalize,
    select_features,
    window,
)
from .nn import (
    AdamState,
    BatchNorm1d,
    Conv1d,
    ConvTranspose1d,
    Dense,
    LeakyReLU,
    Network,
    compose,
    mse_loss,
    optimizer_step,
)
from .seeding import derive_rng

log = logging.getLogger(__name__)

EVAL_CHUNK = 1024


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class CnnAeSpec:
    window: int = 4
    kernel_sizes: tuple[int, int, int] = (8, 6, 4)
    filters: tuple[int, int, int] = (64, 128, 256)
    lr: float = 0.01
    negative_slope: float = 0.01
    batch_size: int = 32

    family = "cnn1d"

    def __post_init__(self) -> None:
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if len(self.kernel_sizes) != 3 or len(self.filters) != 3:
            raise ValueError("the convolutional autoencoder has exactly three encoder stages")
        if self.window < 1 or self.batch_size < 1 or min(self.kernel_sizes + self.filters) < 1:
            raise ValueError("window, batch size, kernels and filters must be positive")


@dataclass(frozen=True)
class UsadSpec:
    """Dense encoder with two decoders.

    Unset sizes resolve per input width ``d = window * n_features``: hidden
    ``d // 2`` and latent ``max(5, d // 8)``.
    """

    window: int = 12
    hidden: int | None = None
    latent_dim: int | None = None
    lr: float = 1e-3
    alpha: float = 0.5
    beta: float = 0.5
    negative_slope: float = 0.01
    batch_size: int = 32

    family = "usad"

    def sizes(self, n_features: int) -> tuple[int, int, int]:
        d = self.window * n_features
        hidden = self.hidden if self.hidden is not None else max(1, d // 2)
        latent = self.latent_dim if self.latent_dim is not None else max(5, d // 8)
        return d, hidden, latent


ModelSpec = Union[CnnAeSpec, UsadSpec]


@dataclass
class TrainResult:
    networks: dict[str, Network]
    losses: dict[str, list[float]]


@dataclass
class TrainedSubmodel:
    group: tuple[int, ...]
    spec: ModelSpec
    networks: dict[str, Network]
    norm_stats: NormStats | None = None
    threshold: float | None = None
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.group:
            raise ValueError("a submodel needs a non-empty feature group")

    @property
    def family(self) -> str:
        return self.spec.family


def build_cnn_ae(spec: CnnAeSpec, n_features: int, seed: int = 0, dtype=np.float32) -> Network:
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    rng = derive_rng(seed, "init", "cnn1d")
    k1, k2, k3 = spec.kernel_sizes
    f1, f2, f3 = spec.filters
    slope = spec.negative_slope

    def stage(cls, c_in, c_out, k):
        return [
            cls(c_in, c_out, k, padding="same", rng=rng, dtype=dtype),
            LeakyReLU(slope),
            BatchNorm1d(c_out, dtype=dtype),
        ]

    layers = (
        stage(Conv1d, n_features, f1, k1)
        + stage(Conv1d, f1, f2, k2)
        + stage(Conv1d, f2, f3, k3)
        + stage(ConvTranspose1d, f3, f2, k3)
        + stage(ConvTranspose1d, f2, f1, k2)
        + [ConvTranspose1d(f1, n_features, k1, padding="same", rng=rng, dtype=dtype)]
    )
    return Network(layers, (spec.window, n_features))


def build_usad(spec: UsadSpec, n_features: int, seed: int = 0, dtype=np.float32) -> dict[str, Network]:
    d, hidden, latent = spec.sizes(n_features)
    slope = spec.negative_slope
    rng_e = derive_rng(seed, "init", "usad", "encoder")
    encoder = Network(
        [Dense(d, hidden, rng_e, dtype), LeakyReLU(slope), Dense(hidden, latent, rng_e, dtype), LeakyReLU(slope)],
        (d,),
    )

    def decoder(name):
        rng = derive_rng(seed, "init", "usad", name)
        return Network(
            [Dense(latent, hidden, rng, dtype), LeakyReLU(slope), Dense(hidden, d, rng, dtype)],
            (latent,),
        )

    return {"encoder": encoder, "decoder1": decoder("decoder1"), "decoder2": decoder("decoder2")}


def _minibatches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_finite(loss: float, what: str, epoch: int, step: int) -> None:
    if not np.isfinite(loss):
        raise TrainingDivergence(f"{what} loss is {loss} at epoch {epoch}, step {step}")


def train_reconstruction(
    net: Network,
    batch: WindowBatch | np.ndarray,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> TrainResult:
    """Fit ``net`` in place to reproduce its input under MSE with Adam.

    Returns per-epoch mean training loss. ``epochs=0`` leaves ``net`` untouched.
    """
    data = _as_inputs(batch, net)
    if len(data) == 0:
        raise ValueError("cannot train on an empty batch")
    rng = derive_rng(seed, "minibatches")
    state = AdamState(lr=lr)
    history = []
    for epoch in range(1, epochs + 1):
        total = 0.0
        for step, idx in enumerate(_minibatches(rng, len(data), batch_size)):
            w = data[idx]
            y, tape = net.forward(w, "train")
            loss, g = mse_loss(y, w)
            _check_finite(loss, "reconstruction", epoch, step)
            grads, _ = net.backward(tape, g)
            net.commit(tape)
            optimizer_step([net], grads, state)
            total += loss * len(idx)
        history.append(total / len(data))
    return TrainResult({"net": net}, {"reconstruction": history})


def usad_weights(epoch: int) -> tuple[float, float]:
    """(direct, adversarial) loss weights at 1-based ``epoch``: ``(1/n, 1 - 1/n)``."""
    direct = 1.0 / epoch
    return direct, 1.0 - direct


def train_usad(
    spec: UsadSpec,
    batch: WindowBatch | np.ndarray,
    epochs: int,
    seed: int,
    nets: dict[str, Network] | None = None,
) -> TrainResult:
    """Two-phase training of the shared-encoder pair.

    Per minibatch, phase 1 updates encoder and decoder 1 on
    ``w·mse(W, AE1(W)) + (1-w)·mse(W, AE2(AE1(W)))`` and phase 2 updates
    decoder 2 on ``w·mse(W, AE2(W)) - (1-w)·mse(W, AE2(AE1(W)))`` with
    ``w = 1/epoch``. The encoder is trained by phase 1 only.
    """
    if epochs < 1:
        raise ValueError("train_usad needs at least one epoch")
    windows = batch.windows if isinstance(batch, WindowBatch) else np.asarray(batch)
    if len(windows) == 0:
        raise ValueError("cannot train on an empty batch")
    n_features = windows.shape[2]
    if nets is None:
        nets = build_usad(spec, n_features, seed)
    enc, dec1, dec2 = nets["encoder"], nets["decoder1"], nets["decoder2"]
    data = windows.reshape(len(windows), -1).astype(enc.dtype)
    rng = derive_rng(seed, "minibatches")
    opt1, opt2 = AdamState(lr=spec.lr), AdamState(lr=spec.lr)
    hist1, hist2 = [], []
    for epoch in range(1, epochs + 1):
        direct, adv = usad_weights(epoch)
        tot1 = tot2 = 0.0
        for step, idx in enumerate(_minibatches(rng, len(data), spec.batch_size)):
            w = data[idx]
            # phase 1: encoder + decoder 1
            z, t_e = enc.forward(w, "train")
            w1, t_d1 = dec1.forward(z, "train")
            l_rec, g_w1 = mse_loss(w1, w)
            loss1 = direct * l_rec
            g_w1 = g_w1 * g_w1.dtype.type(direct)
            g_enc_extra = None
            if adv != 0.0:
                z3, t_e3 = enc.forward(w1, "train")
                w3, t_d2 = dec2.forward(z3, "train")
                l_adv, g_w3 = mse_loss(w3, w)
                loss1 += adv * l_adv
                g_w3 = g_w3 * g_w3.dtype.type(adv)
                _, g_z3 = dec2.backward(t_d2, g_w3)
                g_enc_extra, g_w1_adv = enc.backward(t_e3, g_z3)
                g_w1 = g_w1 + g_w1_adv
            _check_finite(loss1, "AE1", epoch, step)
            g_dec1, g_z = dec1.backward(t_d1, g_w1)
            g_enc, _ = enc.backward(t_e, g_z)
            if g_enc_extra is not None:
                g_enc = [a + b for a, b in zip(g_enc, g_enc_extra)]
            optimizer_step([enc, dec1], g_enc + g_dec1, opt1)

            # phase 2: decoder 2 only
            z = enc(w)
            w1 = dec1(z)
            w2, t_d2 = dec2.forward(z, "train")
            l_rec2, g_w2 = mse_loss(w2, w)
            g_dec2, _ = dec2.backward(t_d2, g_w2 * g_w2.dtype.type(direct))
            loss2 = direct * l_rec2
            if adv != 0.0:
                w3, t_d2b = dec2.forward(enc(w1), "train")
                l_adv, g_w3 = mse_loss(w3, w)
                loss2 -= adv * l_adv
                g_more, _ = dec2.backward(t_d2b, g_w3 * g_w3.dtype.type(-adv))
                g_dec2 = [a + b for a, b in zip(g_dec2, g_more)]
            _check_finite(loss2, "AE2", epoch, step)
            optimizer_step([dec2], g_dec2, opt2)
            tot1 += loss1 * len(idx)
            tot2 += loss2 * len(idx)
        hist1.append(tot1 / len(data))
        hist2.append(tot2 / len(data))
    return TrainResult(dict(nets), {"ae1": hist1, "ae2": hist2})


def _as_inputs(batch: WindowBatch | np.ndarray, net: Network) -> np.ndarray:
    windows = batch.windows if isinstance(batch, WindowBatch) else np.asarray(batch)
    return windows.reshape((len(windows),) + net.input_shape).astype(net.dtype, copy=False)


def _per_sample_mse(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    diff = pred.reshape(len(pred), -1).astype(np.float64) - target.reshape(len(target), -1)
    return np.mean(diff * diff, axis=1)


def window_errors(
    networks: dict[str, Network], spec: ModelSpec, windows: np.ndarray, alpha=None, beta=None
) -> np.ndarray:
    """Per-window anomaly score (eval mode)."""
    out = np.empty(len(windows))
    if spec.family == "cnn1d":
        net = networks["net"]
        data = _as_inputs(windows, net)
        for s in range(0, len(data), EVAL_CHUNK):
            w = data[s : s + EVAL_CHUNK]
            out[s : s + len(w)] = _per_sample_mse(net(w), w)
        return out
    a = spec.alpha if alpha is None else alpha
    b = spec.beta if beta is None else beta
    enc, dec1, dec2 = networks["encoder"], networks["decoder1"], networks["decoder2"]
    data = np.asarray(windows).reshape(len(windows), -1).astype(enc.dtype, copy=False)
    for s in range(0, len(data), EVAL_CHUNK):
        w = data[s : s + EVAL_CHUNK]
        w1 = dec1(enc(w))
        score = a * _per_sample_mse(w1, w)
        if b != 0.0:
            score = score + b * _per_sample_mse(dec2(enc(w1)), w)
        out[s : s + len(w)] = score
    return out


def build_and_train(spec: ModelSpec, batch: WindowBatch, epochs: int, seed: int) -> TrainResult:
    n_features = batch.n_features
    if spec.family == "cnn1d":
        net = build_cnn_ae(spec, n_features, seed)
        return train_reconstruction(net, batch, epochs, spec.lr, seed, spec.batch_size)
    if epochs == 0:
        return TrainResult(build_usad(spec, n_features, seed), {"ae1": [], "ae2": []})
    return train_usad(spec, batch, epochs, seed)


def fit_submodel(
    group: Sequence[int],
    train: TimeSeries,
    spec: ModelSpec,
    epochs: int,
    seed: int,
    stats: NormStats | None = None,
) -> TrainedSubmodel:
    """Train a fresh model on ``train`` (already scaled) restricted to ``group``.

    ``stats`` are the scaling statistics that produced ``train``; they are
    kept, restricted to the group, so that :func:`score` accepts raw data.
    """
    group = tuple(sorted(set(int(g) for g in group)))
    batch = window(select_features(train, group), spec.window, 1)
    result = build_and_train(spec, batch, epochs, seed)
    final = {name: (h[-1] if h else None) for name, h in result.losses.items()}
    return TrainedSubmodel(
        group=group,
        spec=spec,
        networks=result.networks,
        norm_stats=stats.restrict(group) if stats is not None else None,
        train_meta={"epochs": epochs, "seed": seed, "final_losses": final},
    )


def windows_to_points(window_scores: np.ndarray, origin_index: np.ndarray, n_points: int) -> np.ndarray:
    """Assign each window's score to its last point.

    Points with no window ending on them take the score of the next window
    that does, so points before the first full window get the first score.
    """
    pos = np.searchsorted(origin_index, np.arange(n_points), side="left")
    pos = np.minimum(pos, len(origin_index) - 1)
    return window_scores[pos]


def score(model: TrainedSubmodel, ts: TimeSeries, stride: int = 1) -> np.ndarray:
    """Per-point anomaly scores of ``ts`` (raw scale if the model holds stats)."""
    missing = [g for g in model.group if g >= ts.n_features]
    if missing:
        raise DatasetError(f"series lacks features {missing} required by the submodel")
    part = select_features(ts, model.group)
    if model.norm_stats is not None:
        part = apply_normalize(part, model.norm_stats)
    batch = window(part, model.spec.window, stride)
    errs = window_errors(model.networks, model.spec, batch.windows)
    return windows_to_points(errs, batch.origin_index, ts.n_points)

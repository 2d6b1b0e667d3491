"""Multivariate time-series containers and preprocessing.

Series are stored point-major: ``values[t, f]`` is feature ``f`` at time ``t``.
Labels are boolean, ``True`` marking an anomalous point.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter


class DatasetError(ValueError):
    """Raised for malformed inputs to the dataset operations."""


@dataclass(frozen=True)
class TimeSeries:
    values: np.ndarray
    feature_names: tuple[str, ...]
    labels: np.ndarray | None = None
    sample_period: float | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DatasetError(f"values must be a non-empty 2-D matrix, got shape {values.shape}")
        names = tuple(str(n) for n in self.feature_names)
        if len(names) != values.shape[1]:
            raise DatasetError(f"{len(names)} feature names for {values.shape[1]} features")
        if len(set(names)) != len(names):
            raise DatasetError("feature names must be unique")
        if not np.isfinite(values).all():
            row, col = np.argwhere(~np.isfinite(values))[0]
            raise DatasetError(f"non-finite value at row {row}, feature {names[col]!r}")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels, dtype=bool)
            if labels.shape != (values.shape[0],):
                raise DatasetError(
                    f"labels length {labels.shape} does not match {values.shape[0]} points"
                )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "labels", labels)

    @property
    def n_points(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.n_points


@dataclass(frozen=True)
class NormStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.minimum, dtype=np.float64)
        hi = np.asarray(self.maximum, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DatasetError("min/max must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise DatasetError("min must not exceed max")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    @property
    def n_features(self) -> int:
        return self.minimum.shape[0]

    def restrict(self, group: Sequence[int]) -> "NormStats":
        idx = _group_index(group, self.n_features)
        return NormStats(self.minimum[idx], self.maximum[idx])


@dataclass(frozen=True)
class WindowBatch:
    """Sliding windows of shape ``[n_windows, window, n_features]``.

    ``origin_index[i]`` is the index of the last source point in window ``i``.
    """

    windows: np.ndarray
    window: int
    stride: int
    origin_index: np.ndarray

    @property
    def n_windows(self) -> int:
        return self.windows.shape[0]

    @property
    def n_features(self) -> int:
        return self.windows.shape[2]

    def __len__(self) -> int:
        return self.n_windows


@dataclass(frozen=True)
class AnomalySegment:
    start: int
    end: int
    cluster: int
    magnitude: float


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic benchmark description.

    ``n_points`` is the (anomaly-free) train length and ``n_test_points`` the
    test length; segment bounds are test-relative, end exclusive.
    """

    n_points: int = 20_000
    n_features: int = 30
    n_clusters: int = 3
    intra_cluster_corr: float = 0.9
    anomaly_segments: tuple[AnomalySegment, ...] = ()
    seed: int = 0
    n_test_points: int = 5_000
    period_range: tuple[float, float] = (60.0, 240.0)
    noise_ar: float = 0.5

    def __post_init__(self) -> None:
        segs = tuple(
            s if isinstance(s, AnomalySegment) else AnomalySegment(*s) for s in self.anomaly_segments
        )
        object.__setattr__(self, "anomaly_segments", segs)
        self.validate()

    def validate(self) -> None:
        for name in ("n_points", "n_features", "n_clusters", "n_test_points"):
            if int(getattr(self, name)) < 1:
                raise DatasetError(f"{name} must be a positive integer")
        if self.n_features < self.n_clusters:
            raise DatasetError(
                f"n_features ({self.n_features}) must be >= n_clusters ({self.n_clusters})"
            )
        if not 0.0 <= self.intra_cluster_corr <= 1.0:
            raise DatasetError("intra_cluster_corr must lie in [0, 1]")
        if not 0.0 <= self.noise_ar < 1.0:
            raise DatasetError("noise_ar must lie in [0, 1)")
        for s in self.anomaly_segments:
            if not 0 <= s.start < s.end <= self.n_test_points:
                raise DatasetError(f"segment [{s.start}, {s.end}) outside test range")
            if not 0 <= s.cluster < self.n_clusters:
                raise DatasetError(f"segment cluster {s.cluster} out of range")

    def cluster_of(self) -> np.ndarray:
        """Cluster id per feature; the remainder goes to the last cluster."""
        size = self.n_features // self.n_clusters
        ids = np.minimum(np.arange(self.n_features) // size, self.n_clusters - 1)
        return ids.astype(np.int64)


def load_csv(path: str | Path, label_column: str | None = None) -> TimeSeries:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if label_column is not None and label_column not in header:
            raise DatasetError(f"{path}: label column {label_column!r} not in header")
        label_pos = header.index(label_column) if label_column is not None else -1
        names = [h for i, h in enumerate(header) if i != label_pos]
        rows: list[list[float]] = []
        labels: list[bool] = []
        # row numbers are 1-based over data rows (header excluded)
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}: row {rownum} has {len(row)} cells, expected {len(header)}")
            parsed = []
            for i, cell in enumerate(row):
                if i == label_pos:
                    cell = cell.strip()
                    if cell not in ("0", "1"):
                        raise DatasetError(
                            f"{path}: row {rownum}: label {cell!r} in column {header[i]!r} not in {{0, 1}}"
                        )
                    labels.append(cell == "1")
                    continue
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DatasetError(
                        f"{path}: non-numeric cell {cell!r} at row {rownum}, column {header[i]!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return TimeSeries(
        values=np.array(rows, dtype=np.float64),
        feature_names=tuple(names),
        labels=np.array(labels, dtype=bool) if label_column is not None else None,
    )


def write_csv(ts: TimeSeries, path: str | Path, label_column: str = "attack") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(ts.feature_names)
        if ts.labels is not None:
            header.append(label_column)
        writer.writerow(header)
        for t in range(ts.n_points):
            row = [repr(float(v)) for v in ts.values[t]]
            if ts.labels is not None:
                row.append("1" if ts.labels[t] else "0")
            writer.writerow(row)


def fit_normalize(ts: TimeSeries) -> NormStats:
    return NormStats(ts.values.min(axis=0), ts.values.max(axis=0))


def apply_normalize(ts: TimeSeries, stats: NormStats) -> TimeSeries:
    """Min-max scale each feature; constant features map to 0."""
    if stats.n_features != ts.n_features:
        raise DatasetError(
            f"stats cover {stats.n_features} features, series has {ts.n_features}"
        )
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    scaled = (ts.values - stats.minimum) / safe
    scaled[:, span == 0] = 0.0
    return replace(ts, values=scaled)


def invert_normalize(ts: TimeSeries, stats: NormStats) -> TimeSeries:
    if stats.n_features != ts.n_features:
        raise DatasetError(
            f"stats cover {stats.n_features} features, series has {ts.n_features}"
        )
    span = stats.maximum - stats.minimum
    return replace(ts, values=ts.values * span + stats.minimum)


def downsample(ts: TimeSeries, ratio: int) -> TimeSeries:
    """Bucket-mean the values; a bucket is anomalous if any member is.

    The trailing partial bucket is kept.
    """
    ratio = int(ratio)
    if ratio < 1:
        raise DatasetError("downsample ratio must be >= 1")
    if ratio == 1:
        return ts
    starts = np.arange(0, ts.n_points, ratio)
    counts = np.diff(np.append(starts, ts.n_points))
    values = np.add.reduceat(ts.values, starts, axis=0) / counts[:, None]
    labels = None
    if ts.labels is not None:
        labels = np.logical_or.reduceat(ts.labels, starts)
    period = ts.sample_period * ratio if ts.sample_period is not None else None
    return TimeSeries(values, ts.feature_names, labels, period)


def split_train_val(
    ts: TimeSeries, val_fraction: float = 0.2, min_length: int = 1
) -> tuple[TimeSeries, TimeSeries]:
    """Chronological split; ``min_length`` is the largest window in use."""
    if not 0.0 < val_fraction < 1.0:
        raise DatasetError("val_fraction must lie in (0, 1)")
    if ts.labels is not None and ts.labels.any():
        raise DatasetError("train/val split expects anomaly-free data")
    n_val = int(round(ts.n_points * val_fraction))
    n_train = ts.n_points - n_val
    if min(n_train, n_val) < max(1, min_length):
        raise DatasetError(
            f"split of {ts.n_points} points gives train={n_train}, val={n_val}; "
            f"both need at least {max(1, min_length)}"
        )
    return slice_series(ts, 0, n_train), slice_series(ts, n_train, ts.n_points)


def slice_series(ts: TimeSeries, start: int, stop: int) -> TimeSeries:
    labels = ts.labels[start:stop] if ts.labels is not None else None
    return TimeSeries(ts.values[start:stop], ts.feature_names, labels, ts.sample_period)


def concat_series(parts: Iterable[TimeSeries]) -> TimeSeries:
    parts = list(parts)
    names = parts[0].feature_names
    if any(p.feature_names != names for p in parts):
        raise DatasetError("cannot concatenate series with different features")
    labels = None
    if all(p.labels is not None for p in parts):
        labels = np.concatenate([p.labels for p in parts])
    return TimeSeries(
        np.concatenate([p.values for p in parts]), names, labels, parts[0].sample_period
    )


def window(ts: TimeSeries, width: int, stride: int = 1) -> WindowBatch:
    width, stride = int(width), int(stride)
    if width < 1 or stride < 1:
        raise DatasetError("window width and stride must be positive")
    if width > ts.n_points:
        raise DatasetError(f"window width {width} exceeds series length {ts.n_points}")
    view = np.lib.stride_tricks.sliding_window_view(ts.values, width, axis=0)[::stride]
    # sliding_window_view puts the window axis last: [n, features, width]
    windows = np.ascontiguousarray(view.transpose(0, 2, 1))
    origin = np.arange(windows.shape[0]) * stride + width - 1
    return WindowBatch(windows, width, stride, origin)


def select_features(data: TimeSeries | WindowBatch, group: Sequence[int]):
    """Project onto the features in ``group`` (sorted, de-duplicated)."""
    if isinstance(data, WindowBatch):
        idx = _group_index(group, data.n_features)
        return replace(data, windows=np.ascontiguousarray(data.windows[:, :, idx]))
    idx = _group_index(group, data.n_features)
    return TimeSeries(
        data.values[:, idx],
        tuple(data.feature_names[i] for i in idx),
        data.labels,
        data.sample_period,
    )


def _group_index(group: Sequence[int], n_features: int) -> np.ndarray:
    idx = np.unique(np.asarray(list(group), dtype=np.int64))
    if idx.size == 0:
        raise DatasetError("feature group is empty")
    if idx[0] < 0 or idx[-1] >= n_features:
        bad = [int(i) for i in idx if i < 0 or i >= n_features]
        raise DatasetError(f"feature indices {bad} out of range for {n_features} features")
    return idx


def synth_generate(cfg: SynthConfig) -> tuple[TimeSeries, TimeSeries]:
    """Clustered sinusoid-driven sensors with injected test anomalies.

    Features in one cluster mix a shared latent driver (a sinusoid with a
    cluster-specific period plus slow noise) with private AR(1) noise so that
    their pairwise correlation is close to ``intra_cluster_corr``. An anomaly
    segment shifts each feature of the affected cluster by ``magnitude``
    feature standard deviations, with a random sign per feature, which breaks
    the cluster's correlation structure.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_total = cfg.n_points + cfg.n_test_points
    cluster = cfg.cluster_of()
    t = np.arange(n_total, dtype=np.float64)

    latents = np.empty((cfg.n_clusters, n_total))
    for c in range(cfg.n_clusters):
        period = rng.uniform(*cfg.period_range)
        phase = rng.uniform(0.0, 2 * np.pi)
        drift = _ar1(rng, n_total, 0.95)
        z = np.sin(2 * np.pi * t / period + phase) + 0.3 * drift
        latents[c] = (z - z.mean()) / z.std()

    rho = cfg.intra_cluster_corr
    noise = np.stack([_ar1(rng, n_total, cfg.noise_ar) for _ in range(cfg.n_features)], axis=1)
    std = rng.uniform(0.5, 3.0, size=cfg.n_features)
    offset = rng.uniform(-5.0, 5.0, size=cfg.n_features)
    signs = rng.choice([-1.0, 1.0], size=cfg.n_features)
    base = np.sqrt(rho) * latents[cluster].T + np.sqrt(1.0 - rho) * noise
    values = offset + std * base

    labels = np.zeros(cfg.n_test_points, dtype=bool)
    test = values[cfg.n_points :].copy()
    for seg in cfg.anomaly_segments:
        labels[seg.start : seg.end] = True
        members = cluster == seg.cluster
        test[seg.start : seg.end, members] += seg.magnitude * std[members] * signs[members]

    names = tuple(f"F{i:03d}" for i in range(cfg.n_features))
    train_ts = TimeSeries(values[: cfg.n_points], names, np.zeros(cfg.n_points, dtype=bool))
    test_ts = TimeSeries(test, names, labels)
    return train_ts, test_ts


def _ar1(rng: np.random.Generator, n: int, phi: float) -> np.ndarray:
    """Unit-variance stationary AR(1) path."""
    eps = rng.standard_normal(n)
    scale = np.sqrt(1.0 - phi * phi)
    # initial state chosen so that out[0] == eps[0] (stationary start)
    out, _ = lfilter([scale], [1.0, -phi], eps, zi=[eps[0] * (1.0 - scale)])
    return out

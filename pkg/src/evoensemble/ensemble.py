"""Ensemble of per-group submodels: training, calibration, voting and metrics."""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autoencoders import ModelSpec, TrainedSubmodel, fit_submodel, score
from .dataset import DatasetError, NormStats, TimeSeries
from .seeding import derive_seed

log = logging.getLogger(__name__)


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class VotingRule:
    """``majority`` (at least ceil(v/2) votes), ``any`` (>= 1) or ``quorum`` (>= q)."""

    kind: str = "majority"
    q: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("majority", "any", "quorum"):
            raise EnsembleError(f"unknown voting rule {self.kind!r}")
        if self.kind == "quorum" and (self.q is None or self.q < 1):
            raise EnsembleError("quorum voting needs q >= 1")

    @classmethod
    def parse(cls, text: "str | VotingRule") -> "VotingRule":
        if isinstance(text, VotingRule):
            return text
        text = str(text).strip().lower()
        m = re.fullmatch(r"quorum\s*\(\s*(\d+)\s*\)|quorum:(\d+)", text)
        if m:
            return cls("quorum", int(m.group(1) or m.group(2)))
        return cls(text)

    def required(self, n_voters: int) -> int:
        if self.kind == "majority":
            return math.ceil(n_voters / 2)
        if self.kind == "any":
            return 1
        return int(self.q)

    def __str__(self) -> str:
        return f"quorum({self.q})" if self.kind == "quorum" else self.kind


@dataclass
class EnsembleModel:
    submodels: list[TrainedSubmodel]
    voting_rule: VotingRule = field(default_factory=VotingRule)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.submodels:
            raise EnsembleError("an ensemble needs at least one submodel")
        self.voting_rule = VotingRule.parse(self.voting_rule)

    @property
    def calibrated(self) -> bool:
        return all(m.threshold is not None for m in self.submodels)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
        }


def submodel_seed(master: int, group: Sequence[int]) -> int:
    """Seed for the final model of ``group``; depends on content, not position."""
    return derive_seed(master, "submodel", tuple(sorted(set(int(g) for g in group))))


def _fit_job(args):
    group, train, spec, epochs, seed, stats = args
    from .evolution import limit_worker_threads

    limit_worker_threads()
    return fit_submodel(group, train, spec, epochs, seed, stats)


def train_ensemble(
    partition: Sequence[Sequence[int]],
    train: TimeSeries,
    spec: ModelSpec,
    epochs: int = 70,
    seed: int = 0,
    stats: NormStats | None = None,
    voting_rule: "VotingRule | str" = "majority",
    jobs: int = 1,
    provenance: dict | None = None,
) -> EnsembleModel:
    """One submodel per non-empty group (uncalibrated).

    ``train`` must already be scaled; pass the ``stats`` that scaled it so the
    submodels can score raw-scale series.
    """
    groups = [tuple(sorted(set(int(f) for f in g))) for g in partition]
    for i, g in enumerate(groups):
        if not g:
            log.info("group %d is empty; skipped", i)
    live = [g for g in groups if g]
    if not live:
        raise EnsembleError("every group of the partition is empty")
    jobs_args = [(g, train, spec, epochs, submodel_seed(seed, g), stats) for g in live]
    if jobs > 1 and len(live) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(live))) as pool:
            models = list(pool.map(_fit_job, jobs_args))
    else:
        models = [fit_submodel(*a) for a in jobs_args]
    return EnsembleModel(models, VotingRule.parse(voting_rule), dict(provenance or {}))


def percentile_threshold(scores: np.ndarray, percentile: float) -> float:
    """Linear-interpolation percentile (numpy's default ``linear`` method)."""
    return float(np.percentile(np.asarray(scores, dtype=np.float64), percentile, method="linear"))


def calibrate_thresholds(ensemble: EnsembleModel, val: TimeSeries, percentile: float = 99.0) -> EnsembleModel:
    """Set each submodel threshold to a percentile of its scores on anomaly-free ``val``."""
    if not 50.0 < percentile <= 100.0:
        raise EnsembleError("percentile must lie in (50, 100]")
    if val.labels is not None and val.labels.any():
        raise EnsembleError("calibration data must be anomaly-free")
    for m in ensemble.submodels:
        if val.n_points < m.spec.window:
            raise DatasetError(
                f"validation series ({val.n_points} points) is shorter than one window ({m.spec.window})"
            )
        m.threshold = percentile_threshold(score(m, val), percentile)
    return ensemble


def submodel_scores(ensemble: EnsembleModel, ts: TimeSeries) -> np.ndarray:
    """Scores of every submodel, shape ``[v, n_points]``."""
    return np.stack([score(m, ts) for m in ensemble.submodels])


def votes_from_scores(scores: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    """Boolean ``[v, n_points]``: submodel i votes anomaly where score > threshold."""
    return np.asarray(scores) > np.asarray(thresholds, dtype=np.float64)[:, None]


def decide(votes: np.ndarray, rule: "VotingRule | str") -> np.ndarray:
    votes = np.atleast_2d(np.asarray(votes, dtype=bool))
    needed = VotingRule.parse(rule).required(votes.shape[0])
    return votes.sum(axis=0) >= needed


def vote(ensemble: EnsembleModel, ts: TimeSeries) -> np.ndarray:
    if not ensemble.calibrated:
        raise EnsembleError("ensemble thresholds are not calibrated")
    scores = submodel_scores(ensemble, ts)
    thresholds = [m.threshold for m in ensemble.submodels]
    return decide(votes_from_scores(scores, thresholds), ensemble.voting_rule)


def _as_bool(labels, name: str) -> np.ndarray:
    return np.asarray(labels).astype(bool).ravel()


def evaluate(pred, truth) -> Metrics:
    """Point-wise precision/recall/F1 with anomaly as the positive class."""
    p, t = _as_bool(pred, "pred"), _as_bool(truth, "truth")
    if p.shape != t.shape:
        raise EnsembleError(f"prediction length {p.size} != truth length {t.size}")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Metrics(precision, recall, f1, tp, fp, fn, tn)


def anomaly_segments(truth) -> list[tuple[int, int]]:
    """Half-open ``[start, end)`` runs of true labels."""
    t = _as_bool(truth, "truth").astype(np.int8)
    edges = np.diff(np.concatenate([[0], t, [0]]))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def point_adjust(pred, truth) -> np.ndarray:
    """Mark a whole true segment as detected when any of its points is."""
    p, t = _as_bool(pred, "pred").copy(), _as_bool(truth, "truth")
    if p.shape != t.shape:
        raise EnsembleError(f"prediction length {p.size} != truth length {t.size}")
    for start, end in anomaly_segments(t):
        if p[start:end].any():
            p[start:end] = True
    return p

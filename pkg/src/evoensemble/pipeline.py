"""End-to-end commands behind the CLI."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .dataset import (
    DatasetError,
    NormStats,
    TimeSeries,
    apply_normalize,
    downsample,
    fit_normalize,
    load_csv,
    split_train_val,
    synth_generate,
    write_csv,
)
from .ensemble import (
    EnsembleModel,
    calibrate_thresholds,
    decide,
    evaluate,
    point_adjust,
    submodel_scores,
    train_ensemble,
    votes_from_scores,
)
from .evolution import (
    EvolutionError,
    GenerationLog,
    Partition,
    check_partition,
    evolve,
    format_partition,
    read_partition,
    write_fitness_table,
    write_generation_log,
)

log = logging.getLogger(__name__)

REPORT_VERSION = 1


@dataclass
class PreparedData:
    train: TimeSeries  # scaled, anomaly-free
    val: TimeSeries  # scaled, anomaly-free
    test: TimeSeries  # raw scale, labelled
    val_raw: TimeSeries
    stats: NormStats | None


def load_raw(cfg: RunConfig) -> tuple[TimeSeries, TimeSeries]:
    if cfg.data.synth is not None:
        return synth_generate(cfg.data.synth)
    train = load_csv(cfg.data.train_csv, cfg.data.label_column)
    test = load_csv(cfg.data.test_csv, cfg.data.label_column)
    if train.feature_names != test.feature_names:
        raise DatasetError("train and test CSVs have different feature columns")
    return train, test


def prepare_data(cfg: RunConfig) -> PreparedData:
    """Downsample, split chronologically, and min-max scale with train-only stats."""
    train_raw, test_raw = load_raw(cfg)
    pre = cfg.preprocess
    stats = None
    if pre.normalize and pre.normalize_first:
        stats = fit_normalize(train_raw)
    train_raw = downsample(train_raw, pre.downsample)
    test_raw = downsample(test_raw, pre.downsample)
    train, val = split_train_val(train_raw, pre.val_fraction, cfg.model.window)
    if pre.normalize and stats is None:
        stats = fit_normalize(train)
    val_raw = val
    if stats is not None:
        train, val = apply_normalize(train, stats), apply_normalize(val, stats)
    if test_raw.labels is None:
        raise DatasetError("test data needs a label column")
    return PreparedData(train, val, test_raw, val_raw, stats)


def cmd_synth(cfg: RunConfig, out_dir: str | Path | None = None) -> Path:
    if cfg.data.synth is None:
        raise ConfigError("config has no data.synth section")
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = synth_generate(cfg.data.synth)
    write_csv(train, out / "train.csv", cfg.data.label_column)
    write_csv(test, out / "test.csv", cfg.data.label_column)
    manifest = {
        "seed": cfg.data.synth.seed,
        "master_seed": cfg.seed,
        "config_hash": cfg.hash(),
        "files": ["train.csv", "test.csv"],
        "label_column": cfg.data.label_column,
        "n_features": cfg.data.synth.n_features,
        "train_points": cfg.data.synth.n_points,
        "test_points": cfg.data.synth.n_test_points,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def cmd_evolve(cfg: RunConfig, out_dir: str | Path | None = None, jobs: int = 1):
    """Run the GA and write the run directory; returns ``(partition, fitness, history)``."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    data = prepare_data(cfg)
    history: list[GenerationLog] = []

    def on_generation(entry: GenerationLog) -> None:
        history.append(entry)
        write_generation_log(history, out / "generation_log.json")
        write_fitness_table(history, out / "fitness.csv")

    best, best_fit, history = evolve(data.train, data.val, cfg.evolution, jobs=jobs, on_generation=on_generation)
    (out / "best_partition.txt").write_text(
        format_partition(best, data.train.n_features, best_fit), encoding="utf-8"
    )
    return best, best_fit, history


def fit_and_score(
    partition: Partition, cfg: RunConfig, data: PreparedData, jobs: int = 1
) -> tuple[EnsembleModel, np.ndarray]:
    ens = train_ensemble(
        partition,
        data.train,
        cfg.model,
        epochs=cfg.ensemble.final_epochs,
        seed=cfg.ensemble_seed,
        stats=data.stats,
        voting_rule=cfg.ensemble.voting,
        jobs=jobs,
    )
    calibrate_thresholds(ens, data.val_raw if data.stats is not None else data.val, cfg.ensemble.percentile)
    return ens, submodel_scores(ens, data.test)


def _summarise(ens: EnsembleModel, scores: np.ndarray, labels: np.ndarray, point_adjusted: bool) -> dict:
    thresholds = [m.threshold for m in ens.submodels]
    votes = votes_from_scores(scores, thresholds)
    pred = decide(votes, ens.voting_rule)
    out = {
        "voting_rule": str(ens.voting_rule),
        "submodels": [
            {
                "group": list(m.group),
                "threshold": m.threshold,
                "test_score_mean": float(s.mean()),
                "test_score_max": float(s.max()),
                "final_train_loss": m.train_meta["final_losses"],
            }
            for m, s in zip(ens.submodels, scores)
        ],
        "metrics": evaluate(pred, labels).as_dict(),
    }
    if point_adjusted:
        out["metrics_point_adjusted"] = evaluate(point_adjust(pred, labels), labels).as_dict()
    return out, pred, votes


def cmd_train_eval(
    cfg: RunConfig,
    partition_file: str | Path,
    out_dir: str | Path | None = None,
    baseline: bool = False,
    point_adjusted: bool | None = None,
    jobs: int = 1,
    dump_scores: bool = True,
) -> dict:
    """Train the final ensemble on a partition, evaluate on test and write ``report.json``."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    partition, n_features = read_partition(partition_file)
    data = prepare_data(cfg)
    if n_features != data.train.n_features:
        raise EvolutionError(
            f"partition was built for {n_features} features, dataset has {data.train.n_features}"
        )
    check_partition(partition, len(partition), data.train.n_features)
    pa = cfg.ensemble.point_adjust if point_adjusted is None else point_adjusted
    labels = data.test.labels

    ens, scores = fit_and_score(partition, cfg, data, jobs)
    summary, pred, votes = _summarise(ens, scores, labels, pa)
    report = {
        "report_version": REPORT_VERSION,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "partition": [list(g) for g in partition],
        "percentile": cfg.ensemble.percentile,
        "final_epochs": cfg.ensemble.final_epochs,
        "point_adjust": pa,
        "test_points": int(labels.size),
        "test_anomalies": int(labels.sum()),
        "ensemble": summary,
    }
    if baseline:
        mono = (tuple(range(data.train.n_features)),)
        b_ens, b_scores = fit_and_score(mono, cfg, data, jobs)
        report["baseline"], _, _ = _summarise(b_ens, b_scores, labels, pa)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if dump_scores:
        write_scores(out / "scores.csv", scores, votes, pred, labels)
    return report


def write_scores(path: Path, scores: np.ndarray, votes: np.ndarray, pred: np.ndarray, labels: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        v = scores.shape[0]
        w.writerow(["index", "label"] + [f"score_{i}" for i in range(v)] + [f"vote_{i}" for i in range(v)] + ["prediction"])
        for t in range(scores.shape[1]):
            w.writerow(
                [t, int(labels[t])]
                + [repr(float(s)) for s in scores[:, t]]
                + [int(x) for x in votes[:, t]]
                + [int(pred[t])]
            )


def cmd_evaluate(scores_csv: str | Path, point_adjusted: bool = False) -> dict:
    """Metrics from a score dump's ``label`` and ``prediction`` columns."""
    path = Path(scores_csv)
    if not path.is_file():
        raise DatasetError(f"no such score file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "label" not in rows[0] or "prediction" not in rows[0]:
        raise DatasetError(f"{path}: needs 'label' and 'prediction' columns")
    labels = np.array([int(r["label"]) for r in rows], dtype=bool)
    pred = np.array([int(r["prediction"]) for r in rows], dtype=bool)
    out = {"metrics": evaluate(pred, labels).as_dict()}
    if point_adjusted:
        out["metrics_point_adjusted"] = evaluate(point_adjust(pred, labels), labels).as_dict()
    return out

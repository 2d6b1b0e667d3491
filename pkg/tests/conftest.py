"""Shared fixtures: a tiny run config that finishes in seconds."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import yaml

from evoensemble.dataset import TimeSeries

TINY_CONFIG = {
    "schema_version": 1,
    "seed": 3,
    "output_dir": "runs/tiny",
    "data": {
        "label_column": "attack",
        "synth": {
            "n_points": 600,
            "n_test_points": 300,
            "n_features": 6,
            "n_clusters": 2,
            "intra_cluster_corr": 0.9,
            "period_range": [20, 40],
            "anomaly_segments": [[100, 130, 0, 3.0], [200, 230, 1, 3.0]],
        },
    },
    "preprocess": {"downsample": 2, "val_fraction": 0.2},
    "model": {"family": "cnn1d", "window": 4, "kernel_sizes": [3, 3, 3], "filters": [4, 4, 4], "lr": 0.01},
    "evolution": {
        "k": 2,
        "n_generations": 3,
        "population_size": 4,
        "n_parents": 2,
        "fitness_epochs": 1,
    },
    "ensemble": {"final_epochs": 2, "percentile": 99.0, "voting": "any"},
}


@pytest.fixture
def tiny_raw() -> dict:
    return yaml.safe_load(yaml.safe_dump(TINY_CONFIG))


@pytest.fixture
def tiny_config_path(tmp_path: Path, tiny_raw: dict) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_raw), encoding="utf-8")
    return path


def random_series(n_points: int, n_features: int, seed: int = 0, labels: bool = False) -> TimeSeries:
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((n_points, n_features))
    lab = rng.random(n_points) < 0.1 if labels else None
    return TimeSeries(values, tuple(f"f{i}" for i in range(n_features)), lab)

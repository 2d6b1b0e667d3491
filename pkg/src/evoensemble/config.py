"""Run configuration: a schema-versioned YAML file.

One master ``seed`` fans out to every component seed through
:func:`evoensemble.seeding.derive_seed`:

* synthetic data: ``derive_seed(seed, "synth")`` unless ``data.synth.seed`` is set
* evolution: ``derive_seed(seed, "evolution")``
* final submodels: ``derive_seed(seed, "ensemble")`` then per group content
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .autoencoders import CnnAeSpec, ModelSpec, UsadSpec
from .dataset import AnomalySegment, DatasetError, SynthConfig
from .ensemble import EnsembleError, VotingRule
from .evolution import EvolutionConfig, EvolutionError
from .seeding import derive_seed

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass(frozen=True)
class DataConfig:
    synth: SynthConfig | None = None
    train_csv: str | None = None
    test_csv: str | None = None
    label_column: str = "attack"


@dataclass(frozen=True)
class PreprocessConfig:
    downsample: int = 5
    val_fraction: float = 0.2
    normalize: bool = True
    normalize_first: bool = False


@dataclass(frozen=True)
class EnsembleConfig:
    final_epochs: int = 70
    percentile: float = 99.0
    voting: str = "majority"
    point_adjust: bool = False


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    model: ModelSpec = field(default_factory=CnnAeSpec)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    @property
    def evolution_seed(self) -> int:
        return derive_seed(self.seed, "evolution")

    @property
    def ensemble_seed(self) -> int:
        return derive_seed(self.seed, "ensemble")

    def with_seed(self, seed: int) -> "RunConfig":
        cfg = replace(self, seed=int(seed))
        return replace(cfg, data=_resolve_synth_seed(cfg.data, cfg.seed, explicit=False))

    def to_dict(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": _data_to_dict(self.data),
            "preprocess": asdict(self.preprocess),
            "model": {"family": self.model.family, **_spec_to_dict(self.model)},
            "evolution": {
                k: v for k, v in asdict(self.evolution).items() if k not in ("model", "seed")
            },
            "ensemble": asdict(self.ensemble),
        }
        return out

    def hash(self) -> str:
        """SHA-256 of the canonical config, excluding the output location."""
        payload = self.to_dict()
        payload.pop("output_dir")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _spec_to_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _data_to_dict(data: DataConfig) -> dict:
    out: dict[str, Any] = {"label_column": data.label_column}
    if data.synth is not None:
        s = asdict(data.synth)
        s["anomaly_segments"] = [[g.start, g.end, g.cluster, g.magnitude] for g in data.synth.anomaly_segments]
        s["period_range"] = list(data.synth.period_range)
        out["synth"] = s
    else:
        out["train_csv"] = data.train_csv
        out["test_csv"] = data.test_csv
    return out


def _take(section: dict | None, cls, where: str, exclude=()) -> dict:
    section = dict(section or {})
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return section


def _resolve_synth_seed(data: DataConfig, master: int, explicit: bool) -> DataConfig:
    if data.synth is None or explicit:
        return data
    return replace(data, synth=replace(data.synth, seed=derive_seed(master, "synth")))


def parse_config(raw: dict, base_dir: str | Path = ".", check_paths: bool = True) -> RunConfig:
    """Validate a config mapping; every violation raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    known = {"seed", "output_dir", "data", "preprocess", "model", "evolution", "ensemble"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    base_dir = Path(base_dir)
    try:
        data = _parse_data(raw.get("data"), seed, base_dir, check_paths)
        pre = PreprocessConfig(**_take(raw.get("preprocess"), PreprocessConfig, "preprocess"))
        if int(pre.downsample) < 1:
            raise ConfigError("preprocess.downsample must be >= 1")
        if not 0.0 < pre.val_fraction < 1.0:
            raise ConfigError("preprocess.val_fraction must lie in (0, 1)")
        model = _parse_model(raw.get("model"))
        evo_raw = _take(raw.get("evolution"), EvolutionConfig, "evolution", exclude=("model", "seed"))
        evo = EvolutionConfig(**evo_raw, model=model, seed=derive_seed(seed, "evolution"))
        ens = EnsembleConfig(**_take(raw.get("ensemble"), EnsembleConfig, "ensemble"))
        if int(ens.final_epochs) < 0:
            raise ConfigError("ensemble.final_epochs must be >= 0")
        if not 50.0 < float(ens.percentile) <= 100.0:
            raise ConfigError("ensemble.percentile must lie in (50, 100]")
        VotingRule.parse(ens.voting)
    except (TypeError, DatasetError, EvolutionError, EnsembleError) as exc:
        raise ConfigError(str(exc)) from None
    if data.synth is not None and evo.k > data.synth.n_features:
        raise ConfigError(f"evolution.k={evo.k} exceeds synth.n_features={data.synth.n_features}")
    return RunConfig(
        data=data,
        model=model,
        preprocess=pre,
        evolution=evo,
        ensemble=ens,
        output_dir=str(raw.get("output_dir", "runs/default")),
        seed=seed,
    )


def _parse_data(section, seed: int, base_dir: Path, check_paths: bool) -> DataConfig:
    section = _take(section, DataConfig, "data")
    synth = section.get("synth")
    if synth is not None:
        if section.get("train_csv") or section.get("test_csv"):
            raise ConfigError("data: give either synth or train_csv/test_csv, not both")
        synth = _take(synth, SynthConfig, "data.synth")
        explicit = "seed" in synth
        synth["anomaly_segments"] = tuple(AnomalySegment(*s) for s in synth.get("anomaly_segments", ()))
        if "period_range" in synth:
            synth["period_range"] = tuple(synth["period_range"])
        synth.setdefault("seed", 0)
        data = DataConfig(synth=SynthConfig(**synth), label_column=section.get("label_column", "attack"))
        return _resolve_synth_seed(data, seed, explicit)
    if not section.get("train_csv") or not section.get("test_csv"):
        raise ConfigError("data: need synth settings or both train_csv and test_csv")
    paths = {}
    for key in ("train_csv", "test_csv"):
        p = Path(section[key])
        if not p.is_absolute():
            p = base_dir / p
        if check_paths and not p.is_file():
            raise ConfigError(f"data.{key}: no such file {p}")
        paths[key] = str(p)
    return DataConfig(label_column=section.get("label_column", "attack"), **paths)


def _parse_model(section) -> ModelSpec:
    section = dict(section or {})
    family = section.pop("family", "cnn1d")
    cls = {"cnn1d": CnnAeSpec, "usad": UsadSpec}.get(family)
    if cls is None:
        raise ConfigError(f"model.family must be 'cnn1d' or 'usad', got {family!r}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"model: unknown keys {unknown} for family {family}")
    try:
        spec = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in section.items()})
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    if spec.window < 1:
        raise ConfigError("model.window must be >= 1")
    return spec


def load_config(path: str | Path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, base_dir=path.parent, check_paths=check_paths)

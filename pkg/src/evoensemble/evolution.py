"""Genetic search over partitions of features into ``k`` (possibly overlapping) groups."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage
from scipy.spatial.distance import squareform

from .autoencoders import (
    CnnAeSpec,
    ModelSpec,
    TrainingDivergence,
    build_and_train,
    window_errors,
)
from .dataset import TimeSeries, select_features, window
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

FeatureGroup = tuple[int, ...]
Partition = tuple[FeatureGroup, ...]
GroupLoss = Callable[[FeatureGroup], "tuple[float, float] | None"]

PARTITION_MAGIC = "evoensemble-partition"
PARTITION_VERSION = 1


class EvolutionError(ValueError):
    pass


@dataclass(frozen=True)
class EvolutionConfig:
    """GA settings.

    ``k`` groups per solution, mutation probability ``p_m``,
    ``n_generations`` (N_g), ``population_size`` (N_P), ``n_parents`` (N_par)
    and ``fitness_epochs`` (N_ep) epochs per fitness training.
    """

    k: int = 3
    p_m: float = 0.1
    n_generations: int = 10
    population_size: int = 8
    n_parents: int = 4
    fitness_epochs: int = 15
    model: ModelSpec = field(default_factory=CnnAeSpec)
    penalty_empty: float = 10.0
    init_noise: float = 0.1
    preserve_last_copy: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("k", "n_generations", "population_size", "n_parents", "fitness_epochs"):
            if int(getattr(self, name)) < 1:
                raise EvolutionError(f"{name} must be >= 1")
        if self.n_parents > self.population_size:
            raise EvolutionError("n_parents cannot exceed population_size")
        if not 0.0 <= self.p_m <= 1.0:
            raise EvolutionError("p_m must lie in [0, 1]")
        if not 0.0 <= self.init_noise <= 1.0:
            raise EvolutionError("init_noise must lie in [0, 1]")
        if self.penalty_empty < 0:
            raise EvolutionError("penalty_empty must be non-negative")

    @property
    def model_family(self) -> str:
        return self.model.family


@dataclass
class GenerationLog:
    generation: int
    fitness: list[float]
    best_fitness: float
    best_so_far: float
    best_partition: list[list[int]]
    population: list[list[list[int]]]
    duration_s: float
    failed_groups: list[list[int]] = field(default_factory=list)


# -- partitions -------------------------------------------------------------


def make_partition(groups: Iterable[Iterable[int]]) -> Partition:
    return tuple(tuple(sorted(set(int(f) for f in g))) for g in groups)


def check_partition(part: Partition, k: int, n_features: int) -> None:
    if len(part) != k:
        raise EvolutionError(f"partition has {len(part)} groups, expected {k}")
    for g in part:
        if any(f < 0 or f >= n_features for f in g):
            raise EvolutionError(f"group {list(g)} has indices outside [0, {n_features})")


def format_partition(part: Partition, n_features: int, fitness: float | None = None) -> str:
    lines = [f"{PARTITION_MAGIC} {PARTITION_VERSION}", f"n_features {n_features}", f"k {len(part)}"]
    if fitness is not None:
        lines.append(f"fitness {fitness!r}")
    lines += [" ".join(["group"] + [str(f) for f in g]) for g in part]
    return "\n".join(lines) + "\n"


def parse_partition(text: str) -> tuple[Partition, int]:
    """Inverse of :func:`format_partition`; returns ``(partition, n_features)``."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0].split()[0] != PARTITION_MAGIC:
        raise EvolutionError("not a partition file")
    version = int(lines[0].split()[1])
    if version != PARTITION_VERSION:
        raise EvolutionError(f"unsupported partition format version {version}")
    fields, groups = {}, []
    for ln in lines[1:]:
        key, *rest = ln.split()
        if key == "group":
            groups.append([int(v) for v in rest])
        else:
            fields[key] = rest[0]
    n_features, k = int(fields["n_features"]), int(fields["k"])
    part = make_partition(groups)
    check_partition(part, k, n_features)
    return part, n_features


def write_partition(path: str | Path, part: Partition, n_features: int, fitness: float | None = None) -> None:
    Path(path).write_text(format_partition(part, n_features, fitness), encoding="utf-8")


def read_partition(path: str | Path) -> tuple[Partition, int]:
    return parse_partition(Path(path).read_text(encoding="utf-8"))


# -- initialisation ---------------------------------------------------------


def correlation_partition(values: np.ndarray, k: int) -> Partition:
    """Average-linkage clustering on ``1 - |pearson|`` cut at ``k`` clusters.

    Zero-variance features are treated as uncorrelated with everything.
    Groups are ordered by their smallest feature.
    """
    n = values.shape[1]
    if k > n:
        raise EvolutionError(f"k={k} exceeds the {n} available features")
    if k == n:
        return tuple((i,) for i in range(n))
    std = values.std(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(values, rowvar=False)
    corr = np.nan_to_num(corr, nan=0.0)
    corr[std == 0, :] = 0.0
    corr[:, std == 0] = 0.0
    dist = 1.0 - np.abs(corr)
    np.fill_diagonal(dist, 0.0)
    dist = np.clip((dist + dist.T) / 2.0, 0.0, None)
    tree = linkage(squareform(dist, checks=False), method="average")
    labels = cut_tree(tree, n_clusters=k).ravel()
    groups = [tuple(int(i) for i in np.flatnonzero(labels == c)) for c in np.unique(labels)]
    return tuple(sorted(groups))


def perturb_partition(base: Partition, n_features: int, prob: float, rng: np.random.Generator) -> Partition:
    """Move each feature to a uniformly random group with probability ``prob``."""
    k = len(base)
    owner = {}
    for gi, g in enumerate(base):
        for f in g:
            owner.setdefault(f, gi)
    groups = [set(g) for g in base]
    for f in range(n_features):
        if f in owner and rng.random() < prob:
            target = int(rng.integers(k))
            for g in groups:
                g.discard(f)
            groups[target].add(f)
    return make_partition(groups)


def init_population(train: TimeSeries, cfg: EvolutionConfig) -> list[Partition]:
    base = correlation_partition(train.values, cfg.k)
    population = [base]
    for member in range(1, cfg.population_size):
        rng = derive_rng(cfg.seed, "init", member)
        population.append(perturb_partition(base, train.n_features, cfg.init_noise, rng))
    return population


# -- fitness ----------------------------------------------------------------


def fitness_from_losses(
    part: Partition, group_loss: GroupLoss, n_train: int, n_val: int, penalty_empty: float
) -> float:
    """Negated sum of length-weighted, size-normalised group losses.

    ``group_loss(g)`` returns ``(train_loss, val_loss)`` or ``None`` when
    training diverged; empty or diverged groups add ``penalty_empty``.
    The sum is correctly rounded, so group order never changes the result.
    """
    n_x = n_train + n_val
    terms = []
    for g in part:
        losses = group_loss(g) if g else None
        if losses is None:
            terms.append(penalty_empty)
            continue
        loss_t, loss_v = losses
        loss_w = (n_train * loss_t + n_val * loss_v) / n_x
        terms.append(loss_w / len(g))
    return -math.fsum(terms)


def group_seed(master: int, group: FeatureGroup) -> int:
    return derive_seed(master, "fitness", tuple(group))


def train_group_losses(
    group: FeatureGroup, train: TimeSeries, val: TimeSeries, model: ModelSpec, epochs: int, seed: int
) -> tuple[float, float]:
    """Train on ``train[:, group]`` and return mean window loss on train and val."""
    tr = window(select_features(train, group), model.window, 1)
    va = window(select_features(val, group), model.window, 1)
    result = build_and_train(model, tr, epochs, seed)
    loss_t = float(np.mean(window_errors(result.networks, model, tr.windows)))
    loss_v = float(np.mean(window_errors(result.networks, model, va.windows)))
    if not (math.isfinite(loss_t) and math.isfinite(loss_v)):
        raise TrainingDivergence(f"non-finite evaluation loss for group {list(group)}")
    return loss_t, loss_v


def fitness(
    part: Partition,
    train: TimeSeries,
    val: TimeSeries,
    cfg: EvolutionConfig,
    group_loss: GroupLoss | None = None,
) -> float:
    """Fitness of one partition; trains a fresh model per group unless ``group_loss`` is given."""
    if group_loss is None:
        group_loss = _GroupLossCache(train, val, cfg)
    return fitness_from_losses(part, group_loss, train.n_points, val.n_points, cfg.penalty_empty)


class _GroupLossCache:
    """Memoised group losses; seeds depend only on group content, so caching is exact."""

    def __init__(self, train: TimeSeries, val: TimeSeries, cfg: EvolutionConfig, jobs: int = 1):
        self.train, self.val, self.cfg, self.jobs = train, val, cfg, max(1, int(jobs))
        self.cache: dict[FeatureGroup, tuple[float, float] | None] = {}
        self.failed: list[FeatureGroup] = []

    def __call__(self, group: FeatureGroup):
        if group not in self.cache:
            self.prefetch([group])
        return self.cache[group]

    def prefetch(self, groups: Iterable[FeatureGroup]) -> None:
        todo = []
        for g in groups:
            if g and g not in self.cache and g not in todo:
                todo.append(g)
        if not todo:
            return
        jobs = [(g, group_seed(self.cfg.seed, g)) for g in todo]
        if self.jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(
                max_workers=min(self.jobs, len(todo)),
                initializer=_worker_init,
                initargs=(self.train, self.val, self.cfg),
            ) as pool:
                results = list(pool.map(_worker_run, jobs))
        else:
            results = [_run_group(g, s, self.train, self.val, self.cfg) for g, s in jobs]
        for (g, _), res in zip(jobs, results):
            if res is None:
                log.warning("training diverged for group %s; applying empty-group penalty", list(g))
                self.failed.append(g)
            self.cache[g] = res


def _run_group(group, seed, train, val, cfg):
    try:
        return train_group_losses(group, train, val, cfg.model, cfg.fitness_epochs, seed)
    except TrainingDivergence as exc:
        log.debug("group %s diverged: %s", list(group), exc)
        return None


_WORKER: dict = {}


def _worker_init(train, val, cfg) -> None:
    limit_worker_threads()
    _WORKER.update(train=train, val=val, cfg=cfg)


def _worker_run(job):
    group, seed = job
    return _run_group(group, seed, _WORKER["train"], _WORKER["val"], _WORKER["cfg"])


def limit_worker_threads() -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(1)


# -- selection and variation --------------------------------------------------


def select_parents(fitnesses: Sequence[float], n_parents: int) -> list[int]:
    """Indices of the ``n_parents`` fittest solutions, ties to the lower index."""
    order = sorted(range(len(fitnesses)), key=lambda i: (-fitnesses[i], i))
    return order[:n_parents]


def crossover(s1: Partition, s2: Partition, rng: np.random.Generator) -> Partition:
    """Per group pair, keep ``g1`` below a random split point and ``g2`` above it.

    The split point is drawn uniformly from ``[min, max]`` of the union of
    both groups (inclusive); a feature equal to it is dropped.
    """
    if len(s1) != len(s2):
        raise EvolutionError("parents must have the same number of groups")
    child = []
    for g1, g2 in zip(s1, s2):
        union = set(g1) | set(g2)
        if not union:
            child.append(())
            continue
        split = int(rng.integers(min(union), max(union) + 1))
        child.append({f for f in g1 if f < split} | {f for f in g2 if f > split})
    return make_partition(child)


def mutate_move(part: Partition, p_m: float, rng: np.random.Generator) -> Partition:
    """With probability ``p_m`` per group, copy one of its features to the next group."""
    groups = [list(g) for g in part]
    k = len(groups)
    for i in range(k):
        if rng.random() < p_m and groups[i]:
            feature = groups[i][int(rng.integers(len(groups[i])))]
            target = groups[(i + 1) % k]
            if feature not in target:
                target.append(feature)
    return make_partition(groups)


def feature_counts(part: Partition) -> dict[int, int]:
    counts: dict[int, int] = {}
    for g in part:
        for f in g:
            counts[f] = counts.get(f, 0) + 1
    return counts


def mutate_vanish(part: Partition, rng: np.random.Generator, preserve_last_copy: bool = False) -> Partition:
    """Drop each occurrence of a feature with probability ``1 - 1/count``.

    Counts are taken once, before any removal. By default every occurrence
    is decided independently, so all copies of a shared feature can vanish.
    With ``preserve_last_copy`` one uniformly chosen copy of every feature
    survives and the rest are dropped; the per-copy removal probability is
    still ``1 - 1/count``.
    """
    counts = feature_counts(part)
    if preserve_last_copy:
        survivor = {}
        for f, c in sorted(counts.items()):
            survivor[f] = int(rng.integers(c))
        seen: dict[int, int] = {}
        groups = []
        for g in part:
            kept = []
            for f in g:
                copy_idx = seen.get(f, 0)
                seen[f] = copy_idx + 1
                if copy_idx == survivor[f]:
                    kept.append(f)
            groups.append(kept)
        return make_partition(groups)
    groups = []
    for g in part:
        groups.append([f for f in g if not rng.random() > 1.0 / counts[f]])
    return make_partition(groups)


def mutate_new_features(part: Partition, feature_space: Iterable[int], rng: np.random.Generator) -> Partition:
    """Add every feature missing from all groups to each group with probability ``1 - 1/k``."""
    k = len(part)
    present = set(f for g in part for f in g)
    missing = [f for f in feature_space if f not in present]
    if k == 1 and missing:
        log.warning("k=1: missing features are never restored by the new-features mutation")
    groups = [set(g) for g in part]
    for f in missing:
        for g in groups:
            if rng.random() > 1.0 / k:
                g.add(f)
    return make_partition(groups)


def make_offspring(
    parents: Sequence[Partition], n_features: int, cfg: EvolutionConfig, rng: np.random.Generator
) -> Partition:
    if len(parents) >= 2:
        a, b = rng.choice(len(parents), size=2, replace=False)
    else:
        a = b = 0
    child = crossover(parents[int(a)], parents[int(b)], rng)
    child = mutate_move(child, cfg.p_m, rng)
    child = mutate_vanish(child, rng, cfg.preserve_last_copy)
    return mutate_new_features(child, range(n_features), rng)


# -- main loop --------------------------------------------------------------


def evolve(
    train: TimeSeries,
    val: TimeSeries,
    cfg: EvolutionConfig,
    jobs: int = 1,
    group_loss: GroupLoss | None = None,
    on_generation: Callable[[GenerationLog], None] | None = None,
) -> tuple[Partition, float, list[GenerationLog]]:
    """Run the GA; returns the best partition ever evaluated, its fitness and the log.

    Parents survive unchanged into the next generation and keep their
    fitness, so the best-so-far fitness never decreases.
    """
    if train.n_features != val.n_features:
        raise EvolutionError("train and validation series must share features")
    n_features = train.n_features
    population = init_population(train, cfg)
    for p in population:
        check_partition(p, cfg.k, n_features)

    cache = _GroupLossCache(train, val, cfg, jobs) if group_loss is None else None
    lookup = group_loss if group_loss is not None else cache
    known: dict[Partition, float] = {}
    best, best_fit = None, -math.inf
    history: list[GenerationLog] = []

    for gen in range(cfg.n_generations):
        started = time.perf_counter()
        if cache is not None:
            cache.prefetch(g for p in population if p not in known for g in p)
        fits = []
        for p in population:
            if p not in known:
                known[p] = fitness_from_losses(p, lookup, train.n_points, val.n_points, cfg.penalty_empty)
            fits.append(known[p])
        gen_best = max(range(len(fits)), key=lambda i: (fits[i], -i))
        if fits[gen_best] > best_fit:
            best, best_fit = population[gen_best], fits[gen_best]

        parent_idx = select_parents(fits, cfg.n_parents)
        parents = [population[i] for i in parent_idx]
        offspring = [
            make_offspring(parents, n_features, cfg, derive_rng(cfg.seed, "offspring", gen, j))
            for j in range(cfg.population_size - cfg.n_parents)
        ]
        entry = GenerationLog(
            generation=gen,
            fitness=list(fits),
            best_fitness=fits[gen_best],
            best_so_far=best_fit,
            best_partition=[list(g) for g in best],
            population=[[list(g) for g in p] for p in population],
            duration_s=time.perf_counter() - started,
            failed_groups=[list(g) for g in cache.failed] if cache is not None else [],
        )
        history.append(entry)
        log.info("generation %d: best %.6g, best so far %.6g", gen, entry.best_fitness, best_fit)
        if on_generation is not None:
            on_generation(entry)
        population = parents + offspring
    return best, best_fit, history


def write_generation_log(history: Sequence[GenerationLog], path: str | Path) -> None:
    """Atomically (re)write the JSON log, so an interrupted run leaves a valid file."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps([asdict(h) for h in history], indent=1), encoding="utf-8")
    os.replace(tmp, path)


def write_fitness_table(history: Sequence[GenerationLog], path: str | Path) -> None:
    rows = ["generation,solution,fitness"]
    for h in history:
        rows += [f"{h.generation},{i},{f!r}" for i, f in enumerate(h.fitness)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")

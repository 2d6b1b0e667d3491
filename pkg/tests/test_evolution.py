from __future__ import annotations

import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoensemble.dataset import TimeSeries
from evoensemble.evolution import (
    EvolutionConfig,
    EvolutionError,
    correlation_partition,
    crossover,
    evolve,
    feature_counts,
    fitness,
    fitness_from_losses,
    format_partition,
    init_population,
    make_offspring,
    make_partition,
    mutate_move,
    mutate_new_features,
    mutate_vanish,
    parse_partition,
    perturb_partition,
    read_partition,
    select_parents,
    write_generation_log,
    write_partition,
)
from evoensemble.seeding import derive_seed

TRIALS = 10_000


class FixedSplit:
    """Stands in for the generator so a chosen split point can be forced."""

    def __init__(self, split: int):
        self.split = split
        self.bounds: list[tuple[int, int]] = []

    def integers(self, low, high=None):
        self.bounds.append((low, high))
        assert low <= self.split < high
        return self.split


def crossover_oracle(g1, g2, split):
    """Child group as a list of booleans over features, straight from the rule."""
    n = max(list(g1) + list(g2)) + 1
    return tuple(f for f in range(n) if (f in g1 and f < split) or (f in g2 and f > split))


def subsets(n):
    return [tuple(c) for r in range(n + 1) for c in itertools.combinations(range(n), r)]


@pytest.mark.parametrize("n", range(1, 7))
def test_crossover_matches_enumeration(n):
    for g1, g2 in itertools.product(subsets(n), repeat=2):
        union = set(g1) | set(g2)
        if not union:
            assert crossover((g1,), (g2,), np.random.default_rng(0)) == ((),)
            continue
        lo, hi = min(union), max(union)
        for split in range(lo, hi + 1):
            rng = FixedSplit(split)
            child = crossover((g1,), (g2,), rng)
            assert rng.bounds == [(lo, hi + 1)]
            assert child == (crossover_oracle(g1, g2, split),)


def test_crossover_per_group_splits():
    s1 = ((0, 1, 2), (3, 4, 5))
    s2 = ((2, 3), (0, 5))
    splits = iter([1, 4])

    class Seq:
        def integers(self, low, high):
            return next(splits)

    assert crossover(s1, s2, Seq()) == ((0, 2, 3), (3, 5))


def test_crossover_needs_matching_k():
    with pytest.raises(EvolutionError):
        crossover(((0,),), ((0,), (1,)), np.random.default_rng(0))


def test_mutate_vanish_rate_matches_count():
    # feature 0 appears twice, feature 1 four times, feature 2 once
    part = ((0, 1, 2), (0, 1), (1,), (1,))
    removed = {0: 0, 1: 0, 2: 0}
    rng = np.random.default_rng(123)
    for _ in range(TRIALS):
        counts = feature_counts(mutate_vanish(part, rng))
        for f in removed:
            removed[f] += feature_counts(part)[f] - counts.get(f, 0)
    assert abs(removed[0] / (2 * TRIALS) - 0.5) <= 0.02
    assert abs(removed[1] / (4 * TRIALS) - 0.75) <= 0.02
    assert removed[2] == 0


def test_mutate_vanish_preserve_last_copy():
    part = ((0, 1, 2), (0, 1), (1,), (1,))
    rng = np.random.default_rng(7)
    removed_1 = 0
    for _ in range(TRIALS):
        counts = feature_counts(mutate_vanish(part, rng, preserve_last_copy=True))
        assert counts == {0: 1, 1: 1, 2: 1}
        removed_1 += 3
    assert removed_1 / (4 * TRIALS) == 0.75


@pytest.mark.parametrize("k", [2, 4])
def test_mutate_new_features_rate(k):
    part = tuple((0,) for _ in range(k))
    added = 0
    rng = np.random.default_rng(k)
    for _ in range(TRIALS):
        child = mutate_new_features(part, range(2), rng)
        added += sum(1 in g for g in child)
        assert all(0 in g for g in child)
    assert abs(added / (k * TRIALS) - (1 - 1 / k)) <= 0.02


def test_mutate_new_features_k1_never_adds(caplog):
    assert mutate_new_features(((0,),), range(3), np.random.default_rng(0)) == ((0,),)
    assert "k=1" in caplog.text


def test_mutate_move_copies_to_next_group():
    part = ((0,), (1,), (2,))
    assert mutate_move(part, 1.0, np.random.default_rng(0)) == ((0, 2), (0, 1), (1, 2))
    assert mutate_move(part, 0.0, np.random.default_rng(0)) == part


def test_fitness_hand_computed():
    losses = {(0, 1): (0.5, 1.0)}
    assert fitness_from_losses(((0, 1),), losses.get, 80, 20, 10.0) == -0.3


def test_fitness_penalties():
    losses = {(0,): (1.0, 1.0), (1, 2): None}
    # empty group and diverged group both cost the penalty
    assert fitness_from_losses(((0,), (), (1, 2)), losses.get, 3, 1, 10.0) == -21.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.frozensets(st.integers(0, 7), max_size=5), min_size=1, max_size=5), st.randoms())
def test_fitness_permutation_invariant(groups, rnd):
    part = make_partition(groups)
    loss = lambda g: (len(g) * 0.37, sum(g) * 0.11)  # noqa: E731
    shuffled = list(part)
    rnd.shuffle(shuffled)
    a = fitness_from_losses(part, loss, 80, 20, 10.0)
    b = fitness_from_losses(tuple(shuffled), loss, 80, 20, 10.0)
    assert a == b


def test_fitness_trains_once_per_group_content():
    calls = []

    def loss(g):
        calls.append(g)
        return (1.0, 1.0)

    ts = TimeSeries(np.zeros((10, 3)), ("a", "b", "c"))
    value = fitness(((0, 1), (2,)), ts, ts, EvolutionConfig(k=2), group_loss=loss)
    assert value == -1.5
    assert calls == [(0, 1), (2,)]


def test_select_parents_ties_to_lower_index():
    assert select_parents([0.1, 0.5, 0.5, -1.0, 0.3], 3) == [1, 2, 4]


def test_partition_file_round_trip(tmp_path):
    part = ((0, 2), (), (1, 3, 4))
    text = format_partition(part, 5, -0.25)
    assert parse_partition(text) == (part, 5)
    write_partition(tmp_path / "p.txt", part, 5)
    assert read_partition(tmp_path / "p.txt") == (part, 5)


@pytest.mark.parametrize(
    "text",
    ["", "something else\n", "evoensemble-partition 1\nn_features 3\nk 2\ngroup 0\n", "evoensemble-partition 1\nn_features 3\nk 1\ngroup 7\n"],
)
def test_partition_file_errors(text):
    with pytest.raises(EvolutionError):
        parse_partition(text)


def _clustered(n=400, seed=0):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, n))
    cols = [a + 0.1 * rng.standard_normal(n) for _ in range(3)] + [b + 0.1 * rng.standard_normal(n) for _ in range(3)]
    order = [0, 3, 1, 4, 2, 5]
    return np.stack([cols[i] for i in order], axis=1)


def test_correlation_partition_recovers_clusters():
    assert correlation_partition(_clustered(), 2) == ((0, 2, 4), (1, 3, 5))


def test_correlation_partition_edge_cases():
    values = _clustered()
    assert correlation_partition(values, 6) == tuple((i,) for i in range(6))
    assert correlation_partition(values, 1) == (tuple(range(6)),)
    with pytest.raises(EvolutionError):
        correlation_partition(values, 7)


def test_perturbation_keeps_a_partition():
    base = ((0, 1, 2), (3, 4, 5))
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = perturb_partition(base, 6, 0.5, rng)
        flat = sorted(f for g in p for f in g)
        assert flat == list(range(6))
    assert perturb_partition(base, 6, 0.0, rng) == base


def _series():
    values = _clustered(200)
    names = tuple(f"x{i}" for i in range(6))
    return TimeSeries(values[:160], names), TimeSeries(values[160:], names)


def test_init_population_first_member_is_clustering():
    train, _ = _series()
    cfg = EvolutionConfig(k=2, population_size=5, n_parents=2, seed=4)
    pop = init_population(train, cfg)
    assert len(pop) == 5
    assert pop[0] == correlation_partition(train.values, 2)
    assert pop == init_population(train, cfg)


def stub_loss(g):
    """Deterministic pseudo-loss that rewards some groups over others."""
    r = np.random.default_rng(derive_seed(0, "stub", g))
    return float(r.uniform(0.1, 2.0)) * len(g), float(r.uniform(0.1, 2.0)) * len(g) ** 0.5


@pytest.mark.parametrize("seed", range(8))
def test_best_so_far_never_decreases(seed):
    train, val = _series()
    cfg = EvolutionConfig(k=3, n_generations=6, population_size=6, n_parents=3, p_m=0.3, seed=seed)
    best, best_fit, history = evolve(train, val, cfg, group_loss=stub_loss)
    so_far = [h.best_so_far for h in history]
    assert all(b >= a for a, b in zip(so_far, so_far[1:]))
    assert best_fit == so_far[-1] == max(max(h.fitness) for h in history)
    assert fitness_from_losses(best, stub_loss, 160, 40, 10.0) == best_fit


def test_parents_survive_with_cached_fitness():
    train, val = _series()
    cfg = EvolutionConfig(k=2, n_generations=4, population_size=6, n_parents=2, seed=1)
    _, _, history = evolve(train, val, cfg, group_loss=stub_loss)
    for prev, cur in zip(history, history[1:]):
        idx = select_parents(prev.fitness, 2)
        assert cur.population[:2] == [prev.population[i] for i in idx]
        assert cur.fitness[:2] == [prev.fitness[i] for i in idx]


def test_single_generation_returns_best_initial():
    train, val = _series()
    cfg = EvolutionConfig(k=2, n_generations=1, population_size=4, n_parents=2, seed=0)
    best, best_fit, history = evolve(train, val, cfg, group_loss=stub_loss)
    assert len(history) == 1
    pop = [tuple(tuple(g) for g in p) for p in history[0].population]
    fits = [fitness_from_losses(p, stub_loss, 160, 40, 10.0) for p in pop]
    assert best_fit == max(fits) and best == pop[int(np.argmax(fits))]


def test_evolve_is_deterministic():
    train, val = _series()
    cfg = EvolutionConfig(k=2, n_generations=3, population_size=5, n_parents=2, p_m=0.5, seed=9)
    a = evolve(train, val, cfg, group_loss=stub_loss)
    b = evolve(train, val, cfg, group_loss=stub_loss)
    assert a[:2] == b[:2]
    assert [h.population for h in a[2]] == [h.population for h in b[2]]


def test_offspring_are_valid_partitions():
    parents = [((0, 1), (2, 3)), ((0, 3), (1, 2))]
    cfg = EvolutionConfig(k=2, p_m=0.5)
    rng = np.random.default_rng(0)
    for _ in range(200):
        child = make_offspring(parents, 4, cfg, rng)
        assert len(child) == 2
        assert all(0 <= f < 4 for g in child for f in g)


def test_generation_log_is_valid_json_after_each_generation(tmp_path):
    train, val = _series()
    path = tmp_path / "log.json"
    seen = []

    def on_gen(entry):
        seen.append(entry)
        write_generation_log(seen, path)
        assert len(json.loads(path.read_text())) == len(seen)

    cfg = EvolutionConfig(k=2, n_generations=3, population_size=4, n_parents=2)
    evolve(train, val, cfg, group_loss=stub_loss, on_generation=on_gen)
    assert len(seen) == 3


@pytest.mark.parametrize(
    "kwargs",
    [{"k": 0}, {"n_parents": 9, "population_size": 8}, {"p_m": 1.5}, {"penalty_empty": -1.0}],
)
def test_config_validation(kwargs):
    with pytest.raises(EvolutionError):
        EvolutionConfig(**kwargs)


def test_fitness_of_real_training_is_finite():
    train, val = _series()
    from evoensemble.autoencoders import CnnAeSpec

    cfg = EvolutionConfig(k=2, fitness_epochs=1, model=CnnAeSpec(kernel_sizes=(3, 3, 3), filters=(4, 4, 4)))
    value = fitness(((0, 2, 4), (1, 3, 5)), train, val, cfg)
    assert math.isfinite(value) and value < 0

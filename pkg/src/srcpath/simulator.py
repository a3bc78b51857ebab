"""Synthetic student environment.

A student is a vector of latent mastery values in [0, 1], one per concept.
Studying concept ``c`` raises its mastery by an amount gated by how well the
concepts that influence ``c`` are already mastered; every step all mastery
decays slightly. Exams average mastery over the target concepts, and the
learning effect of a path is the normalized exam gain.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

E_SUP = 1.0
PRESETS = ("prereq_chain", "random_sparse", "two_cluster", "custom")


class DegenerateEpisodeError(ValueError):
    """The student already masters the targets, so the learning effect is undefined."""


@dataclass
class WorldConfig:
    num_concepts: int
    influence: np.ndarray
    difficulty: np.ndarray
    base_gain: float = 0.3
    decay: float = 0.995
    noise_std: float = 0.0
    baseline: float = 0.1
    bernoulli: bool = False
    seed: int = 0
    preset: str = "custom"
    # order in which the chain preset links concepts; empty for other presets
    chain: tuple = field(default=())

    def __post_init__(self):
        n = int(self.num_concepts)
        self.influence = np.array(self.influence, dtype=np.float64)
        diff = np.asarray(self.difficulty, dtype=np.float64)
        self.difficulty = np.full(n, float(diff)) if diff.ndim == 0 else diff.copy()
        if n < 1:
            raise ValueError("num_concepts must be positive")
        if self.influence.shape != (n, n):
            raise ValueError(f"influence must be {n}x{n}, got {self.influence.shape}")
        if self.difficulty.shape != (n,):
            raise ValueError("difficulty must have one entry per concept")
        if not (np.all(np.isfinite(self.influence)) and np.all(np.isfinite(self.difficulty))):
            raise ValueError("world parameters must be finite")
        if np.any(self.influence < 0) or np.any(self.influence > 1):
            raise ValueError("influence entries must lie in [0, 1]")
        if np.any(np.diag(self.influence) != 0):
            raise ValueError("influence diagonal must be zero")
        if not 0 < self.base_gain <= 1:
            raise ValueError("base_gain must lie in (0, 1]")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.noise_std < 0 or not 0 <= self.baseline < 1:
            raise ValueError("noise_std must be >= 0 and baseline in [0, 1)")
        self.influence.setflags(write=False)
        self.difficulty.setflags(write=False)

    @property
    def deterministic(self) -> bool:
        return self.noise_std == 0 and not self.bernoulli


def make_world(preset: str = "prereq_chain", num_concepts: int = 8, seed: int = 0, **overrides) -> WorldConfig:
    """Build one of the named influence structures.

    ``prereq_chain`` links concepts in a seeded random order so that each one
    is fully enabled by its predecessor; ``random_sparse`` draws ~20% nonzero
    links; ``two_cluster`` only links concepts within the same half;
    ``custom`` takes the matrix from the ``influence`` override.
    """
    rng = np.random.default_rng(seed)
    n = num_concepts
    influence = np.zeros((n, n))
    chain: tuple = ()
    difficulty: float | np.ndarray = 1.0
    tuning: dict = {}
    if preset == "prereq_chain":
        order = rng.permutation(n)
        for a, b in zip(order[:-1], order[1:]):
            influence[a, b] = 1.0
        chain = tuple(int(c) for c in order)
        # strong gains and noticeable forgetting make the order of study matter
        tuning = {"base_gain": 1.0, "decay": 0.98}
    elif preset == "random_sparse":
        links = rng.random((n, n)) < 0.2
        influence[links] = rng.uniform(0.3, 1.0, size=links.sum())
        difficulty = rng.uniform(0.5, 1.5, size=n)
    elif preset == "two_cluster":
        half = rng.permutation(n)[: n // 2]
        member = np.zeros(n, dtype=bool)
        member[half] = True
        same = member[:, None] == member[None, :]
        influence[same] = rng.uniform(0.0, 0.5, size=same.sum())
        difficulty = 1.0
    elif preset == "custom":
        if "influence" not in overrides:
            raise ValueError("the custom preset needs an influence matrix")
        influence = np.array(overrides.pop("influence"), dtype=np.float64)
    else:
        raise ValueError(f"unknown world preset {preset!r}; expected one of {PRESETS}")
    if preset != "custom":
        np.fill_diagonal(influence, 0.0)
    kwargs = dict(num_concepts=n, influence=influence, difficulty=difficulty, seed=seed, preset=preset, chain=chain)
    kwargs.update(tuning)
    kwargs.update(overrides)
    return WorldConfig(**kwargs)


def load_influence_csv(path) -> np.ndarray:
    """Read an influence matrix, one row per source concept."""
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    return np.array(rows, dtype=np.float64)


def save_influence_csv(path, influence: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(influence):
            writer.writerow([repr(float(x)) for x in row])


class StudentState:
    """Latent mastery of one simulated student."""

    __slots__ = ("mastery",)

    def __init__(self, mastery):
        self.mastery = np.asarray(mastery, dtype=np.float64)

    def clone(self) -> "StudentState":
        return StudentState(self.mastery.copy())

    def __repr__(self):
        return f"StudentState({np.array2string(self.mastery, precision=3)})"


@dataclass
class SimOutcome:
    e_b: float
    e_e: float
    e_sup: float
    e_t: float
    feedback: list


def learning_effect(e_b: float, e_e: float, e_sup: float = E_SUP) -> float:
    """Normalized gain ``(e_e - e_b) / (e_sup - e_b)``."""
    if e_b >= e_sup:
        raise DegenerateEpisodeError(f"pre-exam score {e_b} already at the upper bound {e_sup}")
    return (e_e - e_b) / (e_sup - e_b)


def _check_concept(world: WorldConfig, c) -> int:
    c = int(c)
    if not 0 <= c < world.num_concepts:
        raise IndexError(f"concept id {c} outside [0, {world.num_concepts})")
    return c


def spawn_student(world: WorldConfig, history: Iterable = (), rng=None) -> StudentState:
    """Start from the baseline mastery and replay ``(concept, y)`` history records."""
    mastery = np.full(world.num_concepts, world.baseline)
    for c, y in history:
        c = _check_concept(world, c)
        if not 0.0 <= y <= 1.0:
            raise ValueError(f"history mastery {y} outside [0, 1]")
        mastery[c] = max(mastery[c], y)
        mastery *= world.decay
    return StudentState(mastery)


def learn_step(world: WorldConfig, state: StudentState, concept, rng=None) -> float:
    """Study one concept in place and return the observed feedback."""
    c = _check_concept(world, concept)
    m = state.mastery
    drive = float(world.influence[:, c] @ m) - world.difficulty[c]
    readiness = 1.0 / (1.0 + math.exp(-drive))
    gain = world.base_gain * readiness * (1.0 - m[c])
    if world.noise_std > 0:
        gain += rng.normal() * world.noise_std
    m[c] = min(1.0, max(0.0, m[c] + gain))
    m *= world.decay
    y = float(m[c])
    if world.bernoulli:
        y = float(rng.random() < y)
    return y


def exam(world: WorldConfig, state: StudentState, targets: Sequence) -> float:
    if len(targets) == 0:
        raise ValueError("exam needs at least one target concept")
    idx = [_check_concept(world, t) for t in targets]
    return float(np.mean(state.mastery[idx]))


def study(world: WorldConfig, state: StudentState, path: Sequence, targets: Sequence, rng=None) -> SimOutcome:
    """Run ``path`` on an existing student (mutated in place)."""
    if len(set(int(c) for c in path)) != len(path):
        raise ValueError("path repeats a concept")
    e_b = exam(world, state, targets)
    if e_b >= E_SUP:
        raise DegenerateEpisodeError("targets already mastered")
    feedback = [learn_step(world, state, c, rng) for c in path]
    e_e = exam(world, state, targets)
    return SimOutcome(e_b, e_e, E_SUP, learning_effect(e_b, e_e), feedback)


def run_path(world: WorldConfig, history, path: Sequence, targets: Sequence, rng=None) -> SimOutcome:
    """Spawn a student from ``history``, study ``path`` and grade it on ``targets``."""
    return study(world, spawn_student(world, history, rng), path, targets, rng)


def brute_force_optimal(world: WorldConfig, history, candidates: Sequence, n: int, targets: Sequence, cap: int = 50_000):
    """Best ordered n-selection from ``candidates`` by exhaustive search.

    Paths are visited in lexicographic order of the sorted candidate ids and
    only a strictly better path replaces the incumbent.
    """
    if not world.deterministic:
        raise ValueError("brute force needs a deterministic world (noise_std=0, bernoulli off)")
    m = len(candidates)
    if n > m:
        raise ValueError("path length exceeds candidate count")
    count = math.perm(m, n)
    if count > cap:
        raise ValueError(f"{count} paths exceed the enumeration cap {cap}")
    start = spawn_student(world, history)
    best_path, best = None, -math.inf
    for path in itertools.permutations(sorted(int(c) for c in candidates), n):
        e_t = study(world, start.clone(), path, targets).e_t
        if e_t > best:
            best_path, best = list(path), e_t
    return best_path, best


def enumerate_paths(world: WorldConfig, history, candidates: Sequence, n: int, targets: Sequence, cap: int = 50_000):
    """All ordered n-selections with their learning effect, best first."""
    if math.perm(len(candidates), n) > cap:
        raise ValueError("enumeration cap exceeded")
    start = spawn_student(world, history)
    rows = [
        (list(p), study(world, start.clone(), p, targets).e_t)
        for p in itertools.permutations(sorted(int(c) for c in candidates), n)
    ]
    rows.sort(key=lambda r: -r[1])
    return rows

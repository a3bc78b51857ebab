"""Non-neural comparison policies: random order, sorted single-concept effect, and MPC."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .episode import Episode
from .simulator import WorldConfig, exam, learn_step, learning_effect, run_path, spawn_student


@dataclass
class PolicyOutput:
    path: list
    method: str


def random_policy(episode: Episode, rng: np.random.Generator) -> PolicyOutput:
    """Uniformly random ordered n-selection from the candidates."""
    cands = list(episode.candidates)
    if episode.n > len(cands):
        raise ValueError("path length exceeds candidate count")
    picks = rng.permutation(len(cands))[: episode.n]
    return PolicyOutput([cands[k] for k in picks], "random")


def single_effects(episode: Episode, world: WorldConfig) -> dict:
    """Learning effect on the targets of studying each candidate alone."""
    return {c: run_path(world, episode.history, [c], episode.targets).e_t for c in episode.candidates}


def rule_based_policy(episode: Episode, world: WorldConfig, ascending: bool = True) -> PolicyOutput:
    """Keep the n candidates with the largest single-concept effect, then sort them.

    With ``ascending`` (the default) the weakest of the kept concepts is
    studied first. Ties are broken by concept id.
    """
    if not world.deterministic:
        raise ValueError("rule-based policy needs a deterministic world")
    effects = single_effects(episode, world)
    keep = sorted(episode.candidates, key=lambda c: (-effects[c], c))[: episode.n]
    sign = 1.0 if ascending else -1.0
    path = sorted(keep, key=lambda c: (sign * effects[c], c))
    return PolicyOutput(path, "rule")


def _completion_scores(world, start, base_exam, targets, remaining, length, rollouts, rng):
    """Mean final learning effect over completions of ``length`` drawn from ``remaining``."""
    if length == 0:
        return learning_effect(base_exam, exam(world, start, targets))
    if math.perm(len(remaining), length) <= rollouts:
        completions = list(itertools.permutations(remaining, length))
    else:
        completions = [
            [remaining[k] for k in rng.permutation(len(remaining))[:length]] for _ in range(rollouts)
        ]
    scores = []
    for comp in completions:
        student = start.clone()
        for c in comp:
            learn_step(world, student, c, rng)
        scores.append(learning_effect(base_exam, exam(world, student, targets)))
    return float(np.mean(scores))


def mpc_policy(episode: Episode, world: WorldConfig, rollouts_per_step: int = 16, rng=None) -> PolicyOutput:
    """Receding-horizon planner over simulator clones.

    At each position every unselected candidate is scored by the mean final
    learning effect of random completions of the rest of the path (all
    completions when there are no more than ``rollouts_per_step``), and the
    best-scoring candidate is committed. Ties go to the lower concept id.
    """
    if rollouts_per_step < 1:
        raise ValueError("rollouts_per_step must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    real = spawn_student(world, episode.history)
    base = exam(world, real, episode.targets)
    state = real.clone()
    path: list[int] = []
    remaining = sorted(episode.candidates)
    for pos in range(episode.n):
        left = episode.n - pos - 1
        best_c, best = None, -math.inf
        for c in remaining:
            trial = state.clone()
            learn_step(world, trial, c, rng)
            rest = [r for r in remaining if r != c]
            score = _completion_scores(world, trial, base, episode.targets, rest, left, rollouts_per_step, rng)
            if score > best:
                best_c, best = c, score
        learn_step(world, state, best_c, rng)
        path.append(best_c)
        remaining.remove(best_c)
    return PolicyOutput(path, "mpc")

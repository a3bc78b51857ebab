"""Policy-gradient training of the recommender with the auxiliary mastery loss."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .episode import Episode
from .model import ModelConfig, ModelParams, PathSample, init_params, roll_path
from .simulator import DegenerateEpisodeError, WorldConfig, learn_step, make_world, run_path, spawn_student

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("epoch", "mean_sampled_ET", "greedy_ET", "loss_pg", "loss_kt", "grad_norm", "lr", "seconds")


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    l2: float = 4e-5
    beta: int = 1
    path_length: int = 20
    scenario: int = 2
    # candidate-set size; None means n, or all concepts for scenario 3
    candidate_size: int | None = None
    seed: int = 0
    baseline_subtraction: bool = False
    baseline_momentum: float = 0.9
    # paths sampled per episode; with more than one, the baseline is the
    # mean reward of the episode's other paths
    rollouts_per_episode: int = 1
    optimizer: str = "adam"
    eval_episodes: int = 32
    eval_every: int = 1
    history_max: int = 10

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.beta not in (0, 1):
            raise ValueError("beta must be 0 or 1")
        if self.scenario not in (0, 1, 2, 3):
            raise ValueError("scenario must be one of 0, 1, 2, 3")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if not (self.lr_start > 0 and self.lr_end > 0):
            raise ValueError("learning rates must be positive")
        if self.path_length < 1:
            raise ValueError("path_length must be >= 1")
        if self.rollouts_per_episode < 1 or self.batch_size % self.rollouts_per_episode:
            raise ValueError("rollouts_per_episode must divide batch_size")


@dataclass
class TrainRecord:
    epoch: int
    mean_sampled_ET: float
    greedy_ET: float
    loss_pg: float
    loss_kt: float
    grad_norm: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    records: list = field(default_factory=list)


# ------------------------------------------------------------------ episodes


class CandidateSource:
    """Where candidate sets come from under scenario ``p``.

    0: one fixed subset for the whole run; 1: a fixed partition into groups,
    one group per episode; 2: a fresh random subset each time; 3: every concept.
    """

    def __init__(self, num_concepts: int, scenario: int, n: int, rng: np.random.Generator, size: int | None = None):
        if scenario not in (0, 1, 2, 3):
            raise ValueError(f"invalid scenario {scenario}")
        self.num_concepts = num_concepts
        self.scenario = scenario
        self.n = n
        self.size = num_concepts if scenario == 3 else (size or n)
        if self.size < n or self.size > num_concepts:
            raise ValueError(f"candidate size {self.size} must lie in [{n}, {num_concepts}]")
        self.fixed: tuple = ()
        self.groups: list = []
        if scenario == 0:
            self.fixed = tuple(sorted(int(c) for c in rng.choice(num_concepts, self.size, replace=False)))
        elif scenario == 1:
            count = num_concepts // self.size
            if count < 1:
                raise ValueError("not enough concepts for one group")
            order = rng.permutation(num_concepts)
            self.groups = [tuple(sorted(int(c) for c in order[k * self.size : (k + 1) * self.size])) for k in range(count)]

    def draw(self, rng: np.random.Generator) -> tuple:
        if self.scenario == 0:
            return self.fixed
        if self.scenario == 1:
            return self.groups[int(rng.integers(len(self.groups)))]
        if self.scenario == 2:
            return tuple(sorted(int(c) for c in rng.choice(self.num_concepts, self.size, replace=False)))
        return tuple(range(self.num_concepts))


def random_history(world: WorldConfig, rng: np.random.Generator, max_len: int = 10) -> tuple:
    """A random walk over the influence graph, graded by a fresh simulated student."""
    length = int(rng.integers(0, max_len + 1))
    if length == 0:
        return ()
    student = spawn_student(world, ())
    infl = np.asarray(world.influence)
    c = int(rng.integers(world.num_concepts))
    records = []
    for _ in range(length):
        records.append((c, learn_step(world, student, c, rng)))
        row = infl[c]
        if row.sum() > 0 and rng.random() < 0.7:
            c = int(rng.choice(world.num_concepts, p=row / row.sum()))
        else:
            c = int(rng.integers(world.num_concepts))
    return tuple(records)


def sample_episode(world: WorldConfig, source: CandidateSource, rng: np.random.Generator, history_max: int = 10) -> Episode:
    """Draw (H, S, T) for one episode.

    One target always comes from the candidate set so the episode can score
    above zero; up to two more are drawn from all concepts.
    """
    for _ in range(100):
        cands = source.draw(rng)
        k = int(rng.integers(1, 4))
        first = int(rng.choice(cands))
        rest = [c for c in range(world.num_concepts) if c != first]
        extra = rng.choice(rest, size=min(k - 1, len(rest)), replace=False)
        targets = (first,) + tuple(int(c) for c in extra)
        history = random_history(world, rng, history_max)
        start = spawn_student(world, history)
        if np.mean(start.mastery[list(targets)]) < 1.0:
            return Episode(history, cands, targets, source.n)
    raise DegenerateEpisodeError("could not draw a non-degenerate episode")


def episode_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def heldout_episodes(world: WorldConfig, source: CandidateSource, count: int, seed: int, history_max: int = 10) -> list:
    return [sample_episode(world, source, episode_rng(seed, 7, k), history_max) for k in range(count)]


# ------------------------------------------------------------------ losses


def policy_loss(logprobs: T.Node, reward, baseline=0.0) -> T.Node:
    """Per-episode ``-(E_T - baseline) * sum_i log p_i``, shape (B,).

    ``baseline`` is a scalar or one value per episode.
    """
    adv = np.atleast_1d(np.asarray(reward, dtype=np.float64)) - np.asarray(baseline, dtype=np.float64)
    return T.mul(T.total(logprobs, axis=-1), T.constant(-adv))


def kt_loss(kt_preds: T.Node, feedback) -> T.Node:
    """Per-episode summed binary cross-entropy of mastery predictions, shape (B,)."""
    y = np.asarray(feedback, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    if y.shape != kt_preds.shape:
        raise ValueError(f"feedback shape {y.shape} does not match predictions {kt_preds.shape}")
    return T.total(T.bce(kt_preds, y), axis=-1)


def l2_penalty(params: ModelParams, weight: float) -> T.Node:
    terms = [T.total(T.mul(p, p)) for p in params.nodes()]
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.scale(acc, weight)


def total_loss(sample: PathSample, rewards, feedback, params: ModelParams, beta: int = 1, l2: float = 0.0, baseline=0.0):
    """Batch-mean ``L_pg + beta * L_kt`` plus the L2 term; returns (loss, parts)."""
    pg = policy_loss(sample.step_logprobs, rewards, baseline)
    per_episode = pg
    kt = None
    if beta:
        kt = kt_loss(sample.kt_preds, feedback)
        per_episode = T.add(pg, T.scale(kt, float(beta)))
    loss = T.mean(per_episode)
    reg = None
    if l2:
        reg = l2_penalty(params, l2)
        loss = T.add(loss, reg)
    parts = {
        "pg": float(np.mean(pg.value)),
        "kt": float(np.mean(kt.value)) if kt is not None else float("nan"),
        "l2": float(reg.value) if reg is not None else 0.0,
    }
    return loss, parts


# ------------------------------------------------------------------ optimizers


class SGD:
    def __init__(self, params: ModelParams):
        self.params = params

    def step(self, lr: float) -> None:
        for node in self.params.nodes():
            node.value -= lr * node.grad


class Adam:
    def __init__(self, params: ModelParams, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.value) for k, v in params}
        self.v = {k: np.zeros_like(v.value) for k, v in params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, node in self.params:
            g = node.grad
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            node.value -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Exponential interpolation from ``lr_start`` at epoch 0 to ``lr_end`` at the last epoch."""
    if cfg.epochs <= 1:
        return cfg.lr_start
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


# ------------------------------------------------------------------ loop


def evaluate_greedy(params: ModelParams, config: ModelConfig, world: WorldConfig, episodes: Sequence[Episode]):
    """Greedy paths and their learning effects for ``episodes`` (same m and n)."""
    if not episodes:
        return [], []
    with T.no_grad():
        sample = roll_path(list(episodes), params, config, mode="greedy")
    paths = [sample.path(b) for b in range(len(episodes))]
    outcomes = [run_path(world, ep.history, p, ep.targets) for ep, p in zip(episodes, paths)]
    return paths, outcomes


def _grad_norm(params: ModelParams) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.nodes()))


def _dump_batch(path: Path, episodes, epoch: int, exc: Exception) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"epoch": epoch, "error": str(exc), "episodes": [ep.to_dict() for ep in episodes]}, fh)


def train(
    model_config: ModelConfig,
    world: WorldConfig,
    cfg: TrainConfig,
    params: ModelParams | None = None,
    dump_dir=None,
    source: CandidateSource | None = None,
) -> TrainResult:
    """Run the policy-gradient loop for ``cfg.epochs`` batches.

    Every random stream is derived from ``cfg.seed`` plus (epoch, episode)
    indices, so identical configs reproduce identical records and weights.
    """
    if params is None:
        params = init_params(model_config, episode_rng(cfg.seed, 0))
    if source is None:
        source = CandidateSource(world.num_concepts, cfg.scenario, cfg.path_length, episode_rng(cfg.seed, 1), cfg.candidate_size)
    heldout = heldout_episodes(world, source, cfg.eval_episodes, cfg.seed, cfg.history_max)
    opt = Adam(params) if cfg.optimizer == "adam" else SGD(params)
    baseline = 0.0
    records: list[TrainRecord] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = learning_rate(epoch, cfg)
        K = cfg.rollouts_per_episode
        distinct = [sample_episode(world, source, episode_rng(cfg.seed, 2, epoch, k), cfg.history_max) for k in range(cfg.batch_size // K)]
        episodes = [ep for ep in distinct for _ in range(K)]
        try:
            sample = roll_path(
                episodes,
                params,
                model_config,
                mode="sample",
                rngs=[episode_rng(cfg.seed, 3, epoch, k) for k in range(cfg.batch_size)],
                training=True,
                dropout_rng=episode_rng(cfg.seed, 4, epoch),
            )
            outcomes = [
                run_path(world, ep.history, sample.path(k), ep.targets, episode_rng(cfg.seed, 5, epoch, k))
                for k, ep in enumerate(episodes)
            ]
            rewards = np.array([o.e_t for o in outcomes])
            feedback = np.array([o.feedback for o in outcomes])
            if not cfg.baseline_subtraction:
                adv_base = 0.0
            elif K > 1:
                grouped = rewards.reshape(-1, K)
                adv_base = ((grouped.sum(axis=1, keepdims=True) - grouped) / (K - 1)).reshape(-1)
            else:
                adv_base = baseline
            loss, parts = total_loss(sample, rewards, feedback, params, cfg.beta, cfg.l2, adv_base)
            params.zero_grad()
            loss.backward()
            gnorm = _grad_norm(params)
            if not math.isfinite(gnorm):
                raise T.NonFiniteError("gradient norm is not finite")
        except T.NonFiniteError as exc:
            if dump_dir is not None:
                _dump_batch(Path(dump_dir) / "diverged_batch.json", episodes, epoch, exc)
            raise TrainingDiverged(f"training diverged at epoch {epoch}: {exc}") from exc
        opt.step(lr)
        mean_reward = float(rewards.mean())
        baseline = mean_reward if epoch == 0 else cfg.baseline_momentum * baseline + (1 - cfg.baseline_momentum) * mean_reward
        greedy = float("nan")
        if heldout and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            greedy = float(np.mean([o.e_t for o in evaluate_greedy(params, model_config, world, heldout)[1]]))
        rec = TrainRecord(epoch, mean_reward, greedy, parts["pg"], parts["kt"], gnorm, lr, time.perf_counter() - t0)
        records.append(rec)
        log.debug("epoch %d ET %.4f greedy %.4f", epoch, mean_reward, greedy)
    return TrainResult(params, records)


def write_records_csv(path, records: Sequence[TrainRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow([getattr(r, c) for c in RECORD_COLUMNS])


def records_summary(records: Sequence[TrainRecord]) -> dict:
    if not records:
        return {"epochs": 0}
    last = records[-1]
    return {"epochs": len(records), "final": asdict(last), "best_greedy_ET": max((r.greedy_ET for r in records if r.greedy_ET == r.greedy_ET), default=None)}


def full_loss_gradcheck(seed: int = 0, dim: int = 4, m: int = 5, n: int = 3, eps: float = 1e-5, beta: int = 1) -> dict:
    """Check backprop through the whole training loss on a small random instance.

    Paths, rewards and feedback are frozen from one sampled rollout; dropout
    masks are replayed from a fixed generator so the loss is a deterministic
    function of the parameters.
    """
    num_concepts = max(8, m + 2)
    world = make_world("prereq_chain", num_concepts, seed)
    config = ModelConfig(num_concepts, embed_dim=dim, lstm_hidden=dim, score_dim=dim, dropout_rate=0.5)
    params = init_params(config, episode_rng(seed, 0))
    source = CandidateSource(num_concepts, 2, n, episode_rng(seed, 1), m)
    episodes = [sample_episode(world, source, episode_rng(seed, 2, k), 4) for k in range(3)]

    def rollout():
        return roll_path(
            episodes,
            params,
            config,
            mode="sample",
            rngs=[episode_rng(seed, 3, k) for k in range(len(episodes))],
            training=True,
            dropout_rng=episode_rng(seed, 4),
        )

    with T.no_grad():
        sample = rollout()
    outcomes = [run_path(world, ep.history, sample.path(k), ep.targets) for k, ep in enumerate(episodes)]
    rewards = np.array([o.e_t for o in outcomes])
    feedback = np.array([o.feedback for o in outcomes])
    baseline = float(rewards.mean()) / 2

    def loss_fn():
        return total_loss(rollout(), rewards, feedback, params, beta, 4e-5, baseline)[0]

    t0 = time.perf_counter()
    report = T.grad_report(loss_fn, params.nodes(), eps)
    return {
        "max_rel_error": max(r["rel_error"] for r in report),
        "max_entry_error": max(r["max_entry_error"] for r in report),
        "per_tensor": {name: r for name, r in zip(params.names(), report)},
        "seconds": time.perf_counter() - t0,
    }


def bandit_sanity(seed: int, rewards=(0.2, 1.0, 0.5), steps: int = 2000, batch: int = 8, lr: float = 1e-2, tol: float = 0.95) -> dict:
    """Train the policy on a one-step, three-arm problem with fixed rewards.

    Returns the probability of the best arm and the first update at which it
    reached ``tol`` (None if it never did).
    """
    arms = len(rewards)
    config = ModelConfig(arms, embed_dim=8, lstm_hidden=8, score_dim=8, dropout_rate=0.0)
    params = init_params(config, episode_rng(seed, 0))
    opt = Adam(params)
    rng = episode_rng(seed, 1)
    episode = Episode((), tuple(range(arms)), (0,), 1)
    best = int(np.argmax(rewards))
    baseline, reached, prob = 0.0, None, 0.0
    for step in range(steps):
        sample = roll_path([episode] * batch, params, config, "sample", rng)
        r = np.array([rewards[sample.path(b)[0]] for b in range(batch)])
        loss, _ = total_loss(sample, r, None, params, beta=0, l2=0.0, baseline=baseline)
        params.zero_grad()
        loss.backward()
        opt.step(lr)
        baseline = r.mean() if step == 0 else 0.9 * baseline + 0.1 * r.mean()
        with T.no_grad():
            prob = float(roll_path(episode, params, config, "greedy").distributions[0, 0, best])
        if reached is None and prob >= tol:
            reached = step + 1
    return {"best_prob": prob, "reached_at": reached}

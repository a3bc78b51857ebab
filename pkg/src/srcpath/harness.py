"""Experiment grids: train SRC variants, evaluate every method on shared episodes, report."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import mpc_policy, random_policy, rule_based_policy
from .model import ModelConfig, save_checkpoint
from .simulator import make_world, run_path
from .training import CandidateSource, TrainConfig, episode_rng, evaluate_greedy, sample_episode, train

log = logging.getLogger(__name__)

# learned methods: name -> (encoder variant, beta)
LEARNED = {
    "src": ("combined", 1),
    "src_nokt": ("combined", 0),
    "src_a": ("attention_only", 1),
    "src_a_nokt": ("attention_only", 0),
    "src_m": ("mlp_only", 1),
    "src_m_nokt": ("mlp_only", 0),
}
BASELINES = ("random", "rule", "mpc")
METHODS = tuple(LEARNED) + BASELINES
ABLATION_METHODS = ("src", "src_nokt", "src_a", "src_a_nokt", "src_m", "src_m_nokt")
RESULT_COLUMNS = ("method", "scenario", "length", "seed", "mean_ET", "std_ET", "episodes", "status", "episodes_hash")
SCHEMA_PATH = Path(__file__).with_name("schemas") / "summary.schema.json"


@dataclass
class ExperimentSpec:
    world_preset: str = "prereq_chain"
    num_concepts: int = 24
    world_seed: int = 0
    world_overrides: dict = field(default_factory=dict)
    model: dict = field(default_factory=lambda: {"embed_dim": 16, "lstm_hidden": 16, "score_dim": 16})
    train: TrainConfig = field(default_factory=TrainConfig)
    scenarios: list = field(default_factory=lambda: [0, 1, 2, 3])
    lengths: list = field(default_factory=lambda: [5, 10, 20, 30])
    methods: list = field(default_factory=lambda: ["src", "random", "rule"])
    eval_episodes: int = 100
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    candidate_size: int | None = None
    mpc_rollouts: int = 16
    rule_ascending: bool = True

    def validate(self) -> None:
        if not self.methods:
            raise ValueError("experiment needs at least one method")
        if not self.scenarios:
            raise ValueError("experiment needs at least one scenario")
        if not self.lengths or not self.seeds:
            raise ValueError("experiment needs path lengths and seeds")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        bad = [p for p in self.scenarios if p not in (0, 1, 2, 3)]
        if bad:
            raise ValueError(f"invalid scenarios {bad}")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        for n in self.lengths:
            if n > self.num_concepts:
                raise ValueError(f"path length {n} exceeds the {self.num_concepts} concepts")

    def cell_hash(self) -> str:
        """Hash of everything except the grid axes, so extended grids reuse finished cells."""
        doc = asdict(self)
        for axis in ("scenarios", "lengths", "methods", "seeds"):
            doc.pop(axis)
        return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def cell(self, method, scenario, length, seed) -> dict | None:
        for r in self.rows:
            if (r["method"], r["scenario"], r["length"], r["seed"]) == (method, scenario, length, seed):
                return r
        return None

    def mean(self, method, scenario, length, seed) -> float:
        r = self.cell(method, scenario, length, seed)
        return float("nan") if r is None or r["status"] != "ok" else r["mean_ET"]

    def aggregate(self) -> list[dict]:
        """Per (method, scenario, length): mean over seeds of the per-seed means."""
        groups: dict = {}
        for r in self.rows:
            if r["status"] == "ok":
                groups.setdefault((r["method"], r["scenario"], r["length"]), []).append(r["mean_ET"])
        return [
            {"method": k[0], "scenario": k[1], "length": k[2], "mean_ET": float(np.mean(v)), "seeds": len(v)}
            for k, v in sorted(groups.items())
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for r in self.rows:
                writer.writerow(r)


def _method_config(spec: ExperimentSpec, method: str, scenario: int, length: int, seed: int):
    variant, beta = LEARNED[method]
    model_cfg = ModelConfig(num_concepts=spec.num_concepts, encoder_variant=variant, **spec.model)
    train_cfg = replace(spec.train, beta=beta, path_length=length, scenario=scenario, seed=seed, candidate_size=spec.candidate_size)
    return model_cfg, train_cfg


def _evaluate(method, spec, world, episodes, source, scenario, length, seed, out_dir):
    if method in LEARNED:
        model_cfg, train_cfg = _method_config(spec, method, scenario, length, seed)
        result = train(model_cfg, world, train_cfg, source=source)
        if out_dir is not None:
            ckpt = Path(out_dir) / "checkpoints"
            ckpt.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt / f"{method}_p{scenario}_n{length}_s{seed}.json", result.params, model_cfg)
        paths, outcomes = evaluate_greedy(result.params, model_cfg, world, episodes)
        return paths, outcomes
    paths = []
    for k, ep in enumerate(episodes):
        rng = episode_rng(seed, 13, scenario, length, k)
        if method == "random":
            paths.append(random_policy(ep, rng).path)
        elif method == "rule":
            paths.append(rule_based_policy(ep, world, ascending=spec.rule_ascending).path)
        else:
            paths.append(mpc_policy(ep, world, spec.mpc_rollouts, rng).path)
    outcomes = [run_path(world, ep.history, p, ep.targets) for ep, p in zip(episodes, paths)]
    return paths, outcomes


def eval_episodes_for(spec: ExperimentSpec, world, scenario: int, length: int, seed: int):
    """The candidate source and held-out episodes shared by every method of one cell group."""
    source = CandidateSource(spec.num_concepts, scenario, length, episode_rng(seed, 11, scenario, length), spec.candidate_size)
    episodes = [
        sample_episode(world, source, episode_rng(seed, 12, scenario, length, k), spec.train.history_max)
        for k in range(spec.eval_episodes)
    ]
    return source, episodes


def _digest(episodes) -> str:
    h = hashlib.sha256()
    for ep in episodes:
        h.update(ep.digest().encode())
    return h.hexdigest()[:16]


def run_experiment(spec: ExperimentSpec, out_dir=None) -> ResultTable:
    """Train and evaluate every (method, scenario, length, seed) cell.

    Finished cells are cached under ``out_dir/cells`` keyed by the spec hash
    and the cell key; a failing cell is recorded with status ``failed``.
    """
    spec.validate()
    world = make_world(spec.world_preset, spec.num_concepts, spec.world_seed, **spec.world_overrides)
    out = Path(out_dir) if out_dir is not None else None
    cache = None
    if out is not None:
        cache = out / "cells" / spec.cell_hash()
        cache.mkdir(parents=True, exist_ok=True)
    table = ResultTable()
    path_lines = []
    for seed in spec.seeds:
        for scenario in spec.scenarios:
            for length in spec.lengths:
                source, episodes = eval_episodes_for(spec, world, scenario, length, seed)
                digest = _digest(episodes)
                log.info("cell group p=%d n=%d seed=%d episodes=%s", scenario, length, seed, digest)
                for method in spec.methods:
                    key = f"{method}_p{scenario}_n{length}_s{seed}"
                    cached = cache / f"{key}.json" if cache is not None else None
                    if cached is not None and cached.exists():
                        doc = json.loads(cached.read_text())
                        table.rows.append(doc["row"])
                        path_lines.extend(doc["paths"])
                        continue
                    row = {"method": method, "scenario": scenario, "length": length, "seed": seed, "episodes_hash": digest}
                    lines = []
                    try:
                        paths, outcomes = _evaluate(method, spec, world, episodes, source, scenario, length, seed, out)
                        ets = np.array([o.e_t for o in outcomes])
                        row.update(mean_ET=float(ets.mean()), std_ET=float(ets.std()), episodes=len(ets), status="ok")
                        lines = [
                            {
                                "episode": ep.digest(),
                                "method": method,
                                "scenario": scenario,
                                "length": length,
                                "seed": seed,
                                "path": [int(c) for c in p],
                                "E_T": o.e_t,
                                "Y": o.feedback,
                            }
                            for ep, p, o in zip(episodes, paths, outcomes)
                        ]
                    except Exception as exc:  # noqa: BLE001 - a failing cell must not abort the grid
                        log.error("cell %s failed: %s", key, exc)
                        row.update(mean_ET=None, std_ET=None, episodes=0, status="failed", error=f"{type(exc).__name__}: {exc}")
                        log.debug(traceback.format_exc())
                    table.rows.append(row)
                    path_lines.extend(lines)
                    if cached is not None and row["status"] == "ok":
                        cached.write_text(json.dumps({"row": row, "paths": lines}))
    if out is not None:
        write_reports(out, spec, table, path_lines)
    return table


def ablation_grid(spec: ExperimentSpec, out_dir=None) -> ResultTable:
    """Every encoder variant with and without the auxiliary mastery loss."""
    return run_experiment(replace(spec, methods=list(ABLATION_METHODS)), out_dir)


def summary_doc(spec: ExperimentSpec, table: ResultTable) -> dict:
    return {
        "schema_version": 1,
        "spec": json.loads(json.dumps(asdict(spec), default=str)),
        "spec_hash": spec.cell_hash(),
        "rows": [_clean(r) for r in table.rows],
        "aggregate": table.aggregate(),
    }


def _clean(row: dict) -> dict:
    out = dict(row)
    for k in ("mean_ET", "std_ET"):
        if out.get(k) is not None and not math.isfinite(out[k]):
            out[k] = None
    return out


def write_reports(out: Path, spec: ExperimentSpec, table: ResultTable, path_lines) -> None:
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "results.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump(summary_doc(spec, table), fh, indent=2)
    with open(out / "paths.jsonl", "w") as fh:
        for line in path_lines:
            fh.write(json.dumps(line) + "\n")


def load_schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text())

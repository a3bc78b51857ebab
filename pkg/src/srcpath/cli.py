"""Command-line entry point: train, eval, compare, ablate, oracle, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, build_dataclass, build_world, parse_list, read_config, world_section, write_config
from .harness import LEARNED, METHODS, ExperimentSpec, ablation_grid, run_experiment
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .simulator import enumerate_paths, make_world, save_influence_csv
from .training import (
    CandidateSource,
    TrainConfig,
    evaluate_greedy,
    full_loss_gradcheck,
    heldout_episodes,
    records_summary,
    train,
    write_records_csv,
)

log = logging.getLogger("srcpath")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> list[int]:
    return parse_list(text, int)


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from resetting a value given before it
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="INI file with [world] [model] [train] [experiment]")
    common.add_argument("--seed", type=int, help="override every seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="srcpath", description="Learning-path recommendation with a set-to-sequence policy.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--method", default="src", choices=sorted(LEARNED))
    p.add_argument("--scenario", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", parents=[common], help="greedy evaluation of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--scenario", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--episodes", type=int, default=100)

    for name, text in (("compare", "methods x scenarios x lengths x seeds"), ("ablate", "encoder variants with and without the mastery loss")):
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "compare":
            p.add_argument("--methods", type=lambda s: parse_list(s), help=f"comma list from {','.join(METHODS)}")
        p.add_argument("--scenarios", type=_ints)
        p.add_argument("--lengths", type=_ints)
        p.add_argument("--seeds", type=_ints)
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("oracle", parents=[common], help="enumerate every path for a few small episodes")
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--scenario", type=int, default=2)

    p = sub.add_parser("gradcheck", parents=[common], help="backprop vs finite differences")
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


# ------------------------------------------------------------------ config


def load_sections(args) -> dict:
    if args.config is None:
        return {"world": {}, "model": {}, "train": {}, "experiment": {}}
    return read_config(args.config)


def experiment_from_sections(sections: dict, base_dir=".") -> ExperimentSpec:
    world = build_world(sections["world"], base_dir)
    model = {k: v for k, v in asdict(build_dataclass(ModelConfig, sections["model"], num_concepts=world.num_concepts)).items()}
    model.pop("num_concepts")
    model.pop("encoder_variant")
    train_cfg = build_dataclass(TrainConfig, sections["train"])
    exp = sections["experiment"]
    fields = {}
    for key, kind in (("scenarios", int), ("lengths", int), ("seeds", int)):
        if key in exp:
            fields[key] = parse_list(exp[key], kind)
    if "methods" in exp:
        fields["methods"] = parse_list(exp["methods"])
    for key in ("eval_episodes", "mpc_rollouts"):
        if key in exp:
            fields[key] = int(exp[key])
    if exp.get("candidate_size", "").strip().lower() not in ("", "none"):
        fields["candidate_size"] = int(exp["candidate_size"])
    if "rule_ascending" in exp:
        fields["rule_ascending"] = exp["rule_ascending"].strip().lower() in ("1", "true", "yes", "on")
    unknown = set(exp) - {"scenarios", "lengths", "seeds", "methods", "eval_episodes", "mpc_rollouts", "candidate_size", "rule_ascending"}
    if unknown:
        raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
    overrides = {k: getattr(world, k) for k in ("base_gain", "decay", "noise_std", "baseline", "bernoulli")}
    if world.preset == "custom":
        overrides["influence"] = world.influence.tolist()
    overrides["difficulty"] = world.difficulty.tolist()
    return ExperimentSpec(
        world_preset=world.preset,
        num_concepts=world.num_concepts,
        world_seed=world.seed,
        world_overrides=overrides,
        model=model,
        train=train_cfg,
        **fields,
    )


def _grid_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    changes = {}
    for key in ("methods", "scenarios", "lengths", "seeds"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "epochs", None) is not None:
        changes["train"] = replace(spec.train, epochs=args.epochs)
    return replace(spec, **changes)


def _world(spec: ExperimentSpec):
    return make_world(spec.world_preset, spec.num_concepts, spec.world_seed, **spec.world_overrides)


# ---------------------------------------------------------------- commands


def cmd_train(args, spec: ExperimentSpec) -> int:
    variant, beta = LEARNED[args.method]
    world = _world(spec)
    model_cfg = ModelConfig(num_concepts=spec.num_concepts, encoder_variant=variant, **spec.model)
    changes = {"beta": beta}
    if spec.candidate_size is not None:
        changes["candidate_size"] = spec.candidate_size
    for key, attr in (("scenario", "scenario"), ("length", "path_length"), ("epochs", "epochs"), ("seed", "seed")):
        if getattr(args, key, None) is not None:
            changes[attr] = getattr(args, key)
    cfg = replace(spec.train, **changes)
    out = args.out or Path("runs") / "train"
    out.mkdir(parents=True, exist_ok=True)
    result = train(model_cfg, world, cfg, dump_dir=out)
    save_checkpoint(out / "checkpoint.json", result.params, model_cfg, extra={"train": asdict(cfg)})
    write_records_csv(out / "train_log.csv", result.records)
    world_cfg = world_section(world)
    if world.preset == "custom":
        save_influence_csv(out / "influence.csv", world.influence)
        world_cfg["influence_csv"] = "influence.csv"
        world_cfg.pop("preset")
    write_config(
        out / "config.ini",
        {
            "world": world_cfg,
            "model": {k: v for k, v in asdict(model_cfg).items() if k != "num_concepts"},
            "train": {k: ("none" if v is None else v) for k, v in asdict(cfg).items()},
        },
    )
    print(json.dumps(records_summary(result.records), indent=2, default=float))
    return 0


def cmd_eval(args, spec: ExperimentSpec) -> int:
    params, model_cfg = load_checkpoint(args.checkpoint)
    world = _world(spec)
    if model_cfg.num_concepts != world.num_concepts:
        raise ValueError(f"checkpoint has {model_cfg.num_concepts} concepts, world has {world.num_concepts}")
    seed = spec.train.seed if args.seed is None else args.seed
    scenario = spec.train.scenario if args.scenario is None else args.scenario
    length = spec.train.path_length if args.length is None else args.length
    source = CandidateSource(world.num_concepts, scenario, length, np.random.default_rng([seed, 1]), spec.candidate_size)
    episodes = heldout_episodes(world, source, args.episodes, seed + 1000, spec.train.history_max)
    _, outcomes = evaluate_greedy(params, model_cfg, world, episodes)
    ets = np.array([o.e_t for o in outcomes])
    doc = {"episodes": len(ets), "scenario": scenario, "length": length, "mean_ET": float(ets.mean()), "std_ET": float(ets.std())}
    print(json.dumps(doc, indent=2))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.json").write_text(json.dumps(doc, indent=2))
    return 0


def _print_table(table) -> None:
    print("method,scenario,length,mean_ET,seeds")
    for row in table.aggregate():
        print(f"{row['method']},{row['scenario']},{row['length']},{row['mean_ET']:.4f},{row['seeds']}")
    failed = [r for r in table.rows if r["status"] != "ok"]
    for r in failed:
        print(f"failed: {r['method']} p={r['scenario']} n={r['length']} seed={r['seed']}: {r.get('error')}", file=sys.stderr)


def cmd_compare(args, spec: ExperimentSpec) -> int:
    spec = _grid_overrides(spec, args)
    spec.validate()
    table = run_experiment(spec, args.out or Path("runs") / "compare")
    _print_table(table)
    return 0 if all(r["status"] == "ok" for r in table.rows) else 2


def cmd_ablate(args, spec: ExperimentSpec) -> int:
    spec = _grid_overrides(spec, args)
    table = ablation_grid(spec, args.out or Path("runs") / "ablate")
    _print_table(table)
    return 0 if all(r["status"] == "ok" for r in table.rows) else 2


def cmd_oracle(args, spec: ExperimentSpec) -> int:
    world = _world(spec)
    seed = spec.train.seed if args.seed is None else args.seed
    source = CandidateSource(world.num_concepts, args.scenario, args.n, np.random.default_rng([seed, 1]), args.m)
    episodes = heldout_episodes(world, source, args.episodes, seed, spec.train.history_max)
    docs = []
    for k, ep in enumerate(episodes):
        rows = enumerate_paths(world, ep.history, ep.candidates, args.n, ep.targets)
        print(f"episode {k}: candidates={list(ep.candidates)} targets={list(ep.targets)} history={len(ep.history)}")
        for path, e_t in rows:
            print(f"  {' '.join(str(c) for c in path)}  {e_t:.6f}")
        docs.append({"episode": ep.to_dict(), "paths": [{"path": p, "E_T": e} for p, e in rows]})
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "oracle.json").write_text(json.dumps(docs, indent=2))
    return 0


def _op_checks(rng) -> dict:
    """Finite-difference checks of the individual tensor ops."""
    def p(*shape):
        return T.parameter(rng.normal(size=shape))

    a, b, v, w = p(2, 3, 4), p(2, 4, 5), p(4, 5), p(3, 5)
    mask = np.array([[True, False, True, True, True]] * 3)
    h, c, lw, lb = p(2, 3), p(2, 3), p(4 + 3, 12), p(12)
    x = p(2, 4)
    target = rng.uniform(size=(2, 3))
    cases = {
        "matmul": (lambda: T.total(T.matmul(a, b)), [a, b]),
        "matmul_broadcast": (lambda: T.total(T.tanh(T.matmul(a, v))), [a, v]),
        "masked_softmax": (lambda: T.total(T.mul(T.masked_softmax(w, mask), T.constant(np.arange(15.0).reshape(3, 5)))), [w]),
        "sigmoid_bce": (lambda: T.total(T.bce(T.sigmoid(h), target)), [h]),
        "log": (lambda: T.total(T.log(T.sigmoid(w))), [w]),
        "lstm_step": (lambda: T.total(T.concat(list(T.lstm_step(x, h, c, lw, lb)), axis=-1)), [x, h, c, lw, lb]),
    }
    return {name: T.grad_check(fn, params) for name, (fn, params) in cases.items()}


def cmd_gradcheck(args, spec: ExperimentSpec) -> int:
    seed = 0 if args.seed is None else args.seed
    ops = _op_checks(np.random.default_rng(seed))
    for name, err in ops.items():
        print(f"op {name:18s} max rel err {err:.3e}")
    full = full_loss_gradcheck(seed, args.dim, args.m, args.n)
    for name, r in full["per_tensor"].items():
        print(f"param {name:14s} rel err {r['rel_error']:.3e}")
    worst = max(max(ops.values()), full["max_rel_error"])
    print(f"max rel err {worst:.3e} ({full['seconds']:.1f} s)")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        doc = {"ops": ops, "max_rel_error": worst, "full": {k: v for k, v in full.items() if k != "per_tensor"}}
        (args.out / "gradcheck.json").write_text(json.dumps(doc, indent=2))
    return 0 if worst < args.tol else 2


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": None, "verbose": False}

COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "oracle": cmd_oracle,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    for key, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        sections = load_sections(args)
        base_dir = args.config.parent if args.config is not None else "."
        spec = experiment_from_sections(sections, base_dir)
        if args.seed is not None:
            spec = replace(spec, train=replace(spec.train, seed=args.seed))
        return COMMANDS[args.command](args, spec)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

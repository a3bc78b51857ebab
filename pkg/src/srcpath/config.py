"""INI-style experiment configuration with [world], [model], [train] and [experiment] sections."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

import numpy as np

from .simulator import WorldConfig, load_influence_csv, make_world

SECTIONS = ("world", "model", "train", "experiment")
WORLD_KEYS = {
    "preset": str,
    "num_concepts": int,
    "seed": int,
    "base_gain": float,
    "decay": float,
    "noise_std": float,
    "baseline": float,
    "bernoulli": bool,
    "difficulty": str,
    "influence_csv": str,
}


class ConfigError(ValueError):
    pass


def read_config(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return {name: dict(parser[name]) if parser.has_section(name) else {} for name in SECTIONS}


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_list(text: str, kind=str) -> list:
    return [kind(x.strip()) for x in text.split(",") if x.strip()]


def _convert(text: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if text.strip().lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin in (list, tuple):
        items = parse_list(text, args[0] if args else str)
        return tuple(items) if origin is tuple else items
    if hint is bool:
        return parse_bool(text)
    if hint in (int, float, str):
        return hint(text.strip())
    return text


def build_dataclass(cls, section: dict[str, str], **fixed):
    """Instantiate ``cls`` from string values, converting by field annotation."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = dict(fixed)
    for key, raw in section.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        if key in fixed:
            continue
        try:
            kwargs[key] = _convert(raw, hints[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    return cls(**kwargs)


def build_world(section: dict[str, str], base_dir=".") -> WorldConfig:
    """Preset world plus overrides; ``influence_csv`` replaces the preset matrix."""
    unknown = set(section) - set(WORLD_KEYS)
    if unknown:
        raise ConfigError(f"unknown world keys: {sorted(unknown)}")
    values = {k: (parse_bool(v) if WORLD_KEYS[k] is bool else WORLD_KEYS[k](v)) for k, v in section.items() if v.strip()}
    preset = values.pop("preset", "prereq_chain")
    n = values.pop("num_concepts", 8)
    seed = values.pop("seed", 0)
    csv_path = values.pop("influence_csv", None)
    if "difficulty" in values:
        diff = parse_list(values.pop("difficulty"), float)
        values["difficulty"] = diff[0] if len(diff) == 1 else np.array(diff)
    if csv_path:
        values["influence"] = load_influence_csv(Path(base_dir) / csv_path)
        preset = "custom"
    return make_world(preset, n, seed, **values)


def world_section(world: WorldConfig) -> dict[str, str]:
    """Human-readable config section for ``world`` (the matrix itself is not inlined)."""
    diff = world.difficulty
    same = bool(np.all(diff == diff[0]))
    return {
        "preset": world.preset,
        "num_concepts": str(world.num_concepts),
        "seed": str(world.seed),
        "base_gain": repr(world.base_gain),
        "decay": repr(world.decay),
        "noise_std": repr(world.noise_std),
        "baseline": repr(world.baseline),
        "bernoulli": str(world.bernoulli).lower(),
        "difficulty": repr(float(diff[0])) if same else ", ".join(repr(float(x)) for x in diff),
    }


def write_config(path, sections: dict[str, dict[str, str]]) -> None:
    parser = configparser.ConfigParser()
    for name, values in sections.items():
        parser[name] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)

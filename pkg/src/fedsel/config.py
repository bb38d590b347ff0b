"""TOML experiment configuration.

Schema (every key optional; omitted keys take the dataclass defaults)::

    [run]                      # RunConfig scalars
    n_clients = 100
    sampling_ratio = 0.1
    rounds = 50
    n_clusters = 0             # 0: same as m
    compression_rate = 0.1
    scheme = "hybrid"          # random | importance | cluster_plain | cluster_neyman | hybrid
    model_kind = "logistic"    # logistic | mlp
    partition = "dirichlet"    # iid | dirichlet
    alpha = 0.1
    target_accuracy = 0.9      # omit for "no early stop"
    master_seed = 0
    recluster_every = 1
    importance_norm = "centers"
    allocation_stat = "cohesion"
    variance_probe_draws = 1000
    compression_max_iters = 100

    [run.train]                # TrainConfig (the seed is derived per round, not configured)
    n_sgd = 50
    learning_rate = 0.01
    batch_size = 50

    [run.data]                 # DataConfig
    kind = "synthetic"
    n_samples = 6000

    [sweep]                    # each axis overrides the matching run field; empty = keep run value
    sampling_ratio = []
    n_clusters = [5, 6, 7, 8, 9, 10]
    compression_rate = []
    scheme = []
    seeds = [0, 1, 2]
    max_runs = 1000            # cap on (axis combinations x seeds)

    [output]
    dir = "results"
"""

from __future__ import annotations

import dataclasses
import itertools
import sys
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .engine import RunConfig
from .models import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending key."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}" if field_path else message)
        self.field = field_path


@dataclass(frozen=True)
class SweepConfig:
    sampling_ratio: tuple = ()
    n_clusters: tuple = ()
    compression_rate: tuple = ()
    scheme: tuple = ()
    seeds: tuple = ()
    max_runs: int = 1000

    AXES = ("sampling_ratio", "n_clusters", "compression_rate", "scheme")


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output_dir: str = "results"

    def seeds(self) -> tuple:
        return self.sweep.seeds or (self.run.master_seed,)

    def combinations(self) -> list[dict]:
        """Axis overrides for each sweep point, in row-major axis order."""
        axes = {a: getattr(self.sweep, a) for a in SweepConfig.AXES if getattr(self.sweep, a)}
        return [dict(zip(axes, values)) for values in itertools.product(*axes.values())]

    def expand(self) -> list[tuple[dict, RunConfig]]:
        """Every (overrides, RunConfig) pair of the sweep, seeds innermost."""
        out = []
        for combo in self.combinations():
            for seed in self.seeds():
                out.append((combo, replace(self.run, master_seed=seed, **combo)))
        return out


_SCHEMA_EXCLUDE = {TrainConfig: {"seed"}}


def _type_ok(value, hint) -> bool:
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    return True


def _coerce(value, hint):
    return float(value) if hint is float else value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)} - _SCHEMA_EXCLUDE.get(cls, set())
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for name, value in data.items():
        where = f"{path}.{name}" if path else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, where)
            continue
        optional = typing.get_origin(hint) in (typing.Union, types.UnionType)
        if optional:
            hint = next(a for a in typing.get_args(hint) if a is not type(None))
        if not _type_ok(value, hint):
            raise ConfigError(where, f"expected {hint.__name__}, got {type(value).__name__} {value!r}")
        kwargs[name] = _coerce(value, hint)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        # validators phrase errors as "<field> must ...": point at that field when possible
        first = str(exc).split(" ", 1)[0]
        where = f"{path}.{first}" if first in names else path
        raise ConfigError(where, str(exc)) from exc


_AXIS_TYPES = {"sampling_ratio": float, "n_clusters": int, "compression_rate": float, "scheme": str, "seeds": int}


def _build_sweep(data) -> SweepConfig:
    if not isinstance(data, dict):
        raise ConfigError("sweep", "expected a table")
    unknown = sorted(set(data) - set(_AXIS_TYPES) - {"max_runs"})
    if unknown:
        raise ConfigError(f"sweep.{unknown[0]}", "unknown key")
    kwargs = {}
    for name, hint in _AXIS_TYPES.items():
        values = data.get(name, [])
        if not isinstance(values, list):
            raise ConfigError(f"sweep.{name}", "expected a list")
        for i, v in enumerate(values):
            if not _type_ok(v, hint):
                raise ConfigError(f"sweep.{name}[{i}]", f"expected {hint.__name__}, got {v!r}")
        if len(set(values)) != len(values):
            raise ConfigError(f"sweep.{name}", "duplicate values")
        kwargs[name] = tuple(_coerce(v, hint) for v in values)
    max_runs = data.get("max_runs", 1000)
    if not _type_ok(max_runs, int) or max_runs < 1:
        raise ConfigError("sweep.max_runs", "expected a positive integer")
    return SweepConfig(max_runs=max_runs, **kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    unknown = sorted(set(data) - {"run", "sweep", "output"})
    if unknown:
        raise ConfigError(unknown[0], "unknown table")
    run = _build(RunConfig, data.get("run", {}), "run")
    sweep = _build_sweep(data.get("sweep", {}))
    output = data.get("output", {})
    if not isinstance(output, dict) or set(output) - {"dir"}:
        raise ConfigError("output", "only 'dir' is allowed")
    out_dir = output.get("dir", "results")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("output.dir", "expected a non-empty string")
    cfg = ExperimentConfig(run, sweep, out_dir)
    n_runs = len(cfg.combinations()) * len(cfg.seeds())
    if n_runs > sweep.max_runs:
        raise ConfigError("sweep", f"{n_runs} runs exceed max_runs={sweep.max_runs}")
    try:
        cfg.expand()  # every sweep point must itself be a valid RunConfig
    except ValueError as exc:
        raise ConfigError("sweep", str(exc)) from exc
    return cfg


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"TOML syntax error: {exc}") from exc
    return from_dict(data)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def _table(obj) -> dict:
    skip = _SCHEMA_EXCLUDE.get(type(obj), set())
    out = {}
    for f in fields(obj):
        if f.name in skip:
            continue
        value = getattr(obj, f.name)
        if value is None:
            continue
        out[f.name] = _table(value) if dataclasses.is_dataclass(value) else value
    return out


def to_dict(cfg: ExperimentConfig) -> dict:
    sweep = {name: list(getattr(cfg.sweep, name)) for name in _AXIS_TYPES}
    sweep["max_runs"] = cfg.sweep.max_runs
    return {"run": _table(cfg.run), "sweep": sweep, "output": {"dir": cfg.output_dir}}


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))

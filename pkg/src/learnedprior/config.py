"""JSON experiment configuration.

Every section is optional and falls back to the desk-scale defaults below.
Unknown keys anywhere are errors, and every value is validated before any
compute starts.  Schema (all keys optional)::

    {
      "seed": 0,
      "task": {"synthetic": {<TransferSpec fields>}}
            | {"csv": {"source": path, "target_train": path, "target_val": path,
                       "target_test": path, "target_shifted_test": path | null}},
      "model": {"hidden": [32, 32], "activation": "relu"},
      "pretrain": {"loss": "cross_entropy" | "info_nce", "temperature", "steps", "step_size",
                   "momentum", "batch_size", "weight_var", "aug_noise", "aug_scale", "embed_dim"},
      "swag": {"snapshot_interval", "max_rank", "total_snapshots", "step_size", "momentum",
               "batch_size"},
      "prior": {"lambda", "lambda_grid", "head_var", "head_var_grid", "fe_var"},
      "inference": {"method", "sampler": {<SamplerConfig fields>},
                    "map": {"step_size", "momentum", "n_steps", "batch_size", "schedule"},
                    "jitter", "precondition", "precond_cap"},
      "eval": {"n_bins", "shifted_test", "record_runtime"},
      "analysis": {"ranks", "top_k", "n_random", "grid", "n_seeds", "lambdas", "method"},
      "ensemble": {"k"}
    }
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import TransferSpec
from .pipeline import METHODS, FitPriorSpec, PretrainSpec
from .samplers import SamplerConfig
from .swag import SwagConfig

DEFAULT_LAMBDA_GRID = (1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1e3, 1e4, 1e5)
DEFAULT_HEAD_VAR_GRID = tuple(float(x) for x in np.logspace(-3, 1, 8))
CSV_SPLITS = ("source", "target_train", "target_val", "target_test", "target_shifted_test")


class ConfigError(ValueError):
    def __init__(self, where: str, reason: str):
        super().__init__(f"config error at '{where}': {reason}")
        self.where = where


# --- sections -------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSection:
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu"

    def __post_init__(self):
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise ValueError("hidden must list at least one positive width")
        if self.activation not in ("relu", "tanh"):
            raise ValueError("activation must be 'relu' or 'tanh'")


@dataclass(frozen=True)
class SwagSection:
    snapshot_interval: int = 50
    max_rank: int = 10
    total_snapshots: int = 20
    step_size: float = 0.3
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self):
        SwagConfig(self.snapshot_interval, self.max_rank, self.total_snapshots)
        if not self.step_size > 0 or not 0 <= self.momentum < 1 or self.batch_size < 1:
            raise ValueError("step_size > 0, momentum in [0, 1) and batch_size >= 1 required")

    def spec(self) -> FitPriorSpec:
        return FitPriorSpec(SwagConfig(self.snapshot_interval, self.max_rank, self.total_snapshots),
                            self.step_size, self.momentum, self.batch_size)


@dataclass(frozen=True)
class PriorSection:
    lam: float = 1e3
    lam_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    head_var: float = 1.0
    head_var_grid: tuple[float, ...] = (1.0,)
    fe_var: float = 1.0

    def __post_init__(self):
        for name in ("lam", "head_var", "fe_var"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lam_grid", "head_var_grid"):
            g = getattr(self, name)
            if not g:
                raise ValueError(f"{name} must be non-empty")
            if any(not x > 0 for x in g):
                raise ValueError(f"{name} entries must be positive")


@dataclass(frozen=True)
class MapSection:
    step_size: float = 0.05
    momentum: float = 0.9
    n_steps: int = 1000
    batch_size: int = 64
    schedule: str = "constant"

    def sampler(self) -> SamplerConfig:
        return SamplerConfig("sgd_map", self.step_size, self.momentum, 0.0, self.n_steps,
                             self.batch_size, n_chains=1, samples_per_chain=1,
                             sample_phase_fraction=1.0, schedule=self.schedule)

    def __post_init__(self):
        self.sampler()


def _default_sampler():
    return SamplerConfig("sghmc", 0.1, 0.9, 0.01, 1000, 64, 5, 2, 2)


@dataclass(frozen=True)
class InferenceSection:
    method: str = "bnn_learned"
    sampler: SamplerConfig = field(default_factory=_default_sampler)
    map: MapSection = field(default_factory=MapSection)
    jitter: float = 1e-3
    precondition: bool = True
    precond_cap: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {', '.join(METHODS)}")
        if self.sampler.kind not in ("sgld", "sghmc"):
            raise ValueError("sampler.kind must be 'sgld' or 'sghmc' (MAP runs use the 'map' section)")
        if self.jitter < 0 or not self.precond_cap > 0:
            raise ValueError("jitter >= 0 and precond_cap > 0 required")

    def run_config(self, method: str | None = None) -> SamplerConfig:
        method = method or self.method
        return self.sampler if method.startswith("bnn") else self.map.sampler()


@dataclass(frozen=True)
class EvalSection:
    n_bins: int = 15
    shifted_test: bool = False
    record_runtime: bool = True

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("n_bins must be at least 1")


@dataclass(frozen=True)
class AnalysisSection:
    ranks: tuple[int, ...] | None = None
    top_k: int = 3
    n_random: int = 10
    grid: tuple[float, ...] = tuple(float(x) for x in np.round(np.linspace(-0.5, 0.5, 11), 12))
    n_seeds: int = 5
    lambdas: tuple[float, ...] | None = None
    method: str = "bnn_learned"

    def __post_init__(self):
        if self.ranks is not None:
            object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if self.lambdas is not None:
            object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if self.top_k < 1 or self.n_random < 1 or self.n_seeds < 1:
            raise ValueError("top_k, n_random and n_seeds must be at least 1")
        if not self.grid:
            raise ValueError("grid must be non-empty")
        if self.ranks is not None and (not self.ranks or min(self.ranks) < 0):
            raise ValueError("ranks must be a non-empty list of non-negative integers")
        if self.lambdas is not None and (not self.lambdas or min(self.lambdas) <= 0):
            raise ValueError("lambdas must be a non-empty list of positive values")
        if self.method not in ("bnn_learned", "map_learned"):
            raise ValueError("analysis.method must use the learned prior")


@dataclass(frozen=True)
class EnsembleSection:
    k: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")


def _default_task():
    return TransferSpec(dim=10, source_classes=10, target_classes=10, cluster_sd=0.2, shift=1.2,
                        clusters_per_class=3, n_source=3000, n_target_train=100, n_val=300)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    synthetic: TransferSpec | None = field(default_factory=_default_task)
    csv: dict | None = None
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSpec = field(default_factory=lambda: PretrainSpec(steps=3000, step_size=0.05))
    swag: SwagSection = field(default_factory=SwagSection)
    prior: PriorSection = field(default_factory=PriorSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    eval: EvalSection = field(default_factory=EvalSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    raw: dict = field(default_factory=dict, compare=False)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = dict(self.raw)
        raw["seed"] = seed
        return dataclasses.replace(self, seed=seed, raw=raw)


# --- parsing ---------------------------------------------------------------------------

# JSON key -> dataclass field where the two differ
_ALIASES = {PriorSection: {"lambda": "lam", "lambda_grid": "lam_grid"}}
_SECTIONS = {"model": ModelSection, "pretrain": PretrainSpec, "swag": SwagSection,
             "prior": PriorSection, "eval": EvalSection, "analysis": AnalysisSection,
             "ensemble": EnsembleSection}


def _coerce(value, default, where):
    """Convert JSON values to the type of the dataclass default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(where, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple) or default is None:
        if value is None:
            return None
        if not isinstance(value, list):
            raise ConfigError(where, f"expected a list, got {value!r}")
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(where, "list entries must be numbers")
        kind = type(default[0]) if default else (int if all(isinstance(v, int) for v in value) else float)
        return tuple(kind(v) for v in value)
    return value


def _build(cls, data, where, base=None):
    if not isinstance(data, dict):
        raise ConfigError(where, "expected an object")
    aliases = _ALIASES.get(cls, {})
    names = {f.name for f in dataclasses.fields(cls)}
    base = base if base is not None else cls()
    kw = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        if name not in names or name == "raw":
            raise ConfigError(f"{where}.{key}", "unknown key")
        default = getattr(base, name)
        if isinstance(default, (SamplerConfig, MapSection)):
            kw[name] = _build(type(default), value, f"{where}.{key}", default)
        else:
            kw[name] = _coerce(value, default, f"{where}.{key}")
    try:
        return dataclasses.replace(base, **kw)
    except (ValueError, TypeError) as e:
        raise ConfigError(where, str(e)) from None


def parse_config(data: dict, base_dir: str = ".") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    cfg = ExperimentConfig()
    kw: dict[str, Any] = {"raw": data}
    for key, value in data.items():
        if key == "seed":
            kw["seed"] = _coerce(value, 0, "seed")
        elif key == "task":
            kw.update(_parse_task(value, base_dir))
        elif key == "inference":
            kw["inference"] = _build(InferenceSection, value, "inference")
        elif key in _SECTIONS:
            kw[key] = _build(_SECTIONS[key], value, key, getattr(cfg, key))
        else:
            raise ConfigError(key, "unknown key")
    if kw.get("seed", 0) < 0:
        raise ConfigError("seed", "must be non-negative")
    cfg = dataclasses.replace(cfg, **kw)
    if cfg.analysis.ranks is not None and max(cfg.analysis.ranks) > cfg.swag.max_rank:
        raise ConfigError("analysis.ranks", f"ranks exceed swag.max_rank={cfg.swag.max_rank}")
    if cfg.eval.shifted_test and cfg.csv is not None and not cfg.csv.get("target_shifted_test"):
        raise ConfigError("eval.shifted_test", "no target_shifted_test file configured")
    return cfg


def _parse_task(value, base_dir):
    if not isinstance(value, dict) or len(value) != 1:
        raise ConfigError("task", "expected exactly one of 'synthetic' or 'csv'")
    (kind, body), = value.items()
    if kind == "synthetic":
        return {"synthetic": _build(TransferSpec, body, "task.synthetic", _default_task()), "csv": None}
    if kind == "csv":
        if not isinstance(body, dict):
            raise ConfigError("task.csv", "expected an object")
        paths = {}
        for key, p in body.items():
            if key not in CSV_SPLITS:
                raise ConfigError(f"task.csv.{key}", "unknown key")
            if p is None:
                continue
            full = p if os.path.isabs(p) else os.path.join(base_dir, p)
            if not os.path.isfile(full):
                raise ConfigError(f"task.csv.{key}", f"file not found: {full}")
            paths[key] = full
        for key in CSV_SPLITS[:4]:
            if key not in paths:
                raise ConfigError(f"task.csv.{key}", "required")
        return {"csv": paths, "synthetic": None}
    raise ConfigError(f"task.{kind}", "unknown task kind")


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"invalid JSON: {e}") from None
    return parse_config(data, os.path.dirname(os.path.abspath(path)))

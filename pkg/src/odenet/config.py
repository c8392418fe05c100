"""Experiment configuration: one JSON document drives a full experiment.

Schema (all paths relative to the config file's directory unless absolute):

{
  "name": "urp_case_a",
  "system": "URP",                     // URP | BF
  "composer": "BLACK_BOX",             // BLACK_BOX | GRAY_FUNCTIONAL | ...
  "kappa_trainable": ["b", "beta"],    // optional
  "kappa_init": {"b": 1.0},            // optional, default 1.0 when trainable
  "pathology": { ... PathologySpec fields ... },
  "rollout":   { ... RolloutConfig fields (mode fixed by the command) ... },
  "metrics":   ["solution", "rhs", "kinetic", "params"],
  "evaluation": {"n_test_points": 1000, "horizon": 20.0, ...},  // optional
  "gates":     {"rhs_l2": 2e-2},       // optional CI thresholds
  "seed": 0,
  "runs": 1,
  "out": "runs/urp_case_a"
}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import PathologySpec
from .errors import ConfigError
from .training import RolloutConfig

KNOWN_METRICS = ("solution", "rhs", "kinetic", "params")


@dataclass
class EvaluationConfig:
    n_test_points: int = 1000
    t_settle: float | None = None     # None: per-system default
    t_spread: float | None = None
    horizon: float = 20.0
    dt_eval: float = 0.25
    n_cycle_points: int = 50

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationConfig":
        return cls(**d)


@dataclass
class ExperimentConfig:
    name: str
    system: str
    composer: str
    pathology: PathologySpec
    rollout: RolloutConfig
    metrics: tuple[str, ...] = KNOWN_METRICS
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    kappa_trainable: tuple[str, ...] = ()
    kappa_init: dict[str, float] = field(default_factory=dict)
    gates: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    runs: int = 1
    out: str = "runs"

    def __post_init__(self):
        if self.system not in ("URP", "BF"):
            raise ConfigError(f"unknown system '{self.system}'")
        unknown = set(self.metrics) - set(KNOWN_METRICS)
        if unknown:
            raise ConfigError(f"unknown metrics {sorted(unknown)}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")

    def rollout_for_run(self, run: int) -> RolloutConfig:
        return replace(self.rollout, seed=self.seed + run)


def _build(d: dict, path: Path | None) -> ExperimentConfig:
    try:
        pathology = PathologySpec(
            mean_dt=tuple(d["pathology"]["mean_dt"])
            if isinstance(d["pathology"]["mean_dt"], list)
            else d["pathology"]["mean_dt"],
            sampling=d["pathology"].get("sampling", "FIXED"),
            gamma_shape=d["pathology"].get("gamma_shape", 4.0),
            observation=d["pathology"].get("observation", "FULL"),
            withhold_ic=d["pathology"].get("withhold_ic", False),
            horizon=d["pathology"]["horizon"],
            n_trajectories=d["pathology"].get("n_trajectories", 100),
            ic_box=tuple(tuple(b) for b in d["pathology"]["ic_box"]),
            param_ranges={k: tuple(v) for k, v in d["pathology"].get("param_ranges", {}).items()},
            noise_std=d["pathology"].get("noise_std", 0.0),
            ic_settle=d["pathology"].get("ic_settle", 0.0),
        )
        roll = dict(d["rollout"])
        roll.setdefault("seed", d.get("seed", 0))
        roll.pop("mode", None)  # commands fix the rollout mode themselves
        if "hidden" in roll:
            roll["hidden"] = tuple(roll["hidden"])
        rollout = RolloutConfig(**roll)
        return ExperimentConfig(
            name=d["name"],
            system=d["system"],
            composer=d["composer"],
            pathology=pathology,
            rollout=rollout,
            metrics=tuple(d.get("metrics", KNOWN_METRICS)),
            evaluation=EvaluationConfig.from_dict(d.get("evaluation", {})),
            kappa_trainable=tuple(d.get("kappa_trainable", ())),
            kappa_init={k: float(v) for k, v in d.get("kappa_init", {}).items()},
            gates={k: float(v) for k, v in d.get("gates", {}).items()},
            seed=d.get("seed", 0),
            runs=d.get("runs", 1),
            out=d.get("out", "runs"),
        )
    except (KeyError, TypeError) as err:
        where = f" in {path}" if path else ""
        raise ConfigError(f"bad experiment config{where}: {err}") from err


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    return _build(doc, path)


def config_from_dict(doc: dict) -> ExperimentConfig:
    return _build(doc, None)

"""Flat ``key = value`` experiment configs.

Ranges are written ``lo,hi`` and keyed per variable, e.g.
``hard_range.Z = -1,1`` or ``context_range.Age = 55,75``. Predicates for
performance-gain analyses are separated by ``;``. Lines starting with ``#``
are comments.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Mapping

from .optimizer import METHODS, RunConfig
from .policy import CROSS_TASK_RULES, FAMILIES
from .scm import BUILTIN_SCMS, PredicateError, parse_predicate

__all__ = ["ConfigError", "ExperimentConfig", "defaults_for", "format_config", "parse_config"]


class ConfigError(ValueError):
    """Carries every problem found, one message per entry of ``errors``."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class ExperimentConfig:
    scm: str = "chain"
    methods: tuple[str, ...] = ("fcbo", "cbo")
    n_seeds: int = 20
    seed: int = 0
    trials: int = 50
    samples_per_trial: int = 10000
    grid_size: int = 10
    n_anchors: int = 10
    coeff_range: tuple[float, float] = (-0.27, 0.27)
    cost_kind: str = "scope-size"
    cost_grid_points: int = 50
    func_kernel: str = "linear"
    func_hyper: tuple[float, ...] = (1.0,)
    cross_task_rule: str = "zero"
    theta_hard: tuple[float, float] = (1.0, 1.0)
    theta_func: tuple[float, float] = (7000.0, 20.0)
    noise_variance: float = 1e-4
    context_pool_size: int = 1000
    literal_fei: bool = False
    record_timing: bool = False
    pgain: tuple[str, ...] = ()
    pgain_samples: int = 1_000_000
    hard_range: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    context_range: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def seeds(self) -> list[int]:
        return list(range(self.seed, self.seed + self.n_seeds))

    def run_config(self, method: str, seed: int) -> RunConfig:
        return RunConfig(
            scm_name=self.scm,
            method=method,
            trials=self.trials,
            samples_per_trial=self.samples_per_trial,
            grid_size=self.grid_size,
            hard_ranges=dict(self.hard_range),
            coeff_range=self.coeff_range,
            n_anchors=self.n_anchors,
            cost_kind=self.cost_kind,
            context_ranges=dict(self.context_range),
            cost_grid_points=self.cost_grid_points,
            func_kernel=self.func_kernel,
            func_hyper=self.func_hyper,
            cross_task_rule=self.cross_task_rule,
            theta_hard=self.theta_hard,
            theta_func=self.theta_func,
            noise_variance=self.noise_variance,
            context_pool_size=self.context_pool_size,
            literal_fei=self.literal_fei,
            rng_seed=seed,
        )

    def validate(self) -> list[str]:
        errors = []
        if self.scm not in BUILTIN_SCMS:
            errors.append(f"scm must be one of {sorted(BUILTIN_SCMS)}, got {self.scm!r}")
        if not self.methods:
            errors.append("methods must name at least one method")
        for m in self.methods:
            if m not in METHODS:
                errors.append(f"unknown method {m!r}; choose from {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            errors.append("methods must not repeat")
        if self.n_seeds < 1:
            errors.append("n_seeds must be >= 1")
        if self.seed < 0:
            errors.append("seed must be >= 0")
        if self.func_kernel not in FAMILIES:
            errors.append(f"func_kernel must be one of {sorted(FAMILIES)}")
        elif len(self.func_hyper) != FAMILIES[self.func_kernel]:
            errors.append(f"func_hyper needs {FAMILIES[self.func_kernel]} values for {self.func_kernel}")
        if self.cross_task_rule not in CROSS_TASK_RULES:
            errors.append(f"cross_task_rule must be one of {CROSS_TASK_RULES}")
        if self.pgain_samples < 1:
            errors.append("pgain_samples must be >= 1")
        for text in self.pgain:
            try:
                parse_predicate(text)
            except PredicateError as exc:
                errors.append(f"bad pgain predicate {text!r}: {exc}")
        # RunConfig checks ranges, theta, grid and so on; method is checked above
        errors.extend(e for e in self.run_config(METHODS[0], 0).validate() if not e.startswith("method"))
        return errors


_PAIR_KEYS = {"coeff_range", "theta_hard", "theta_func"}
_RANGE_PREFIXES = ("hard_range.", "context_range.")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _convert(name: str, text: str):
    kind = {f.name: f for f in fields(ExperimentConfig)}[name].type
    if name == "methods":
        return tuple(m.strip() for m in text.split(",") if m.strip())
    if name == "pgain":
        return tuple(p.strip() for p in text.split(";") if p.strip())
    if name in _PAIR_KEYS:
        values = _floats(text)
        if len(values) != 2:
            raise ValueError("expected two comma-separated numbers")
        return values
    if name == "func_hyper":
        return _floats(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        return _bool(text)
    return text


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse config text on top of the defaults for its ``scm`` (or ``base``).

    Raises ConfigError listing every bad line and every validation failure.
    """
    errors: list[str] = []
    values: dict[str, object] = {}
    ranges: dict[str, dict[str, tuple[float, float]]] = {"hard_range": {}, "context_range": {}}
    known = {f.name for f in fields(ExperimentConfig)} - {"hard_range", "context_range"}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected key = value")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key.startswith(_RANGE_PREFIXES):
                group, var = key.split(".", 1)
                lo_hi = _floats(value)
                if len(lo_hi) != 2 or not var:
                    raise ValueError("expected lo,hi")
                ranges[group][var] = lo_hi
            elif key in known:
                if key in values:
                    raise ValueError("duplicate key")
                values[key] = _convert(key, value)
            else:
                raise ValueError("unknown key")
        except ValueError as exc:
            errors.append(f"line {lineno}: {key}: {exc}")
    if errors:
        raise ConfigError(errors)
    if base is None:
        scm = values.get("scm", "chain")
        base = defaults_for(scm) if scm in BUILTIN_SCMS else ExperimentConfig(scm=scm)
    cfg = replace(
        base,
        **values,
        hard_range={**base.hard_range, **ranges["hard_range"]},
        context_range={**base.context_range, **ranges["context_range"]},
    )
    problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg


def defaults_for(scm: str) -> ExperimentConfig:
    """Experiment defaults for a built-in model."""
    if scm == "chain":
        return ExperimentConfig(
            scm="chain",
            hard_range={"W": (-1.0, 1.0), "Z": (-1.0, 1.0)},
            pgain=("X<0", "X>0"),
        )
    if scm == "health":
        return ExperimentConfig(
            scm="health",
            trials=80,
            samples_per_trial=1000,
            grid_size=5,
            coeff_range=(0.0, 3.3),
            cost_kind="area",
            func_kernel="rbf",
            func_hyper=(1.0, 1.0),
            theta_func=(1.0, 1.0),
            hard_range={k: (0.1, 1.0) for k in ("Aspirin", "CI", "Statin")},
            context_range={"Age": (55.0, 75.0), "BMI": (19.0, 35.0)},
            pgain=("Age>65",),
            pgain_samples=100_000,
        )
    if scm in ("prop1_case_i", "prop1_case_ii"):
        return ExperimentConfig(
            scm=scm,
            trials=20,
            hard_range={"C": (-1.0, 1.0), "X": (-1.0, 1.0)},
        )
    raise KeyError(f"no defaults for SCM {scm!r}")


def format_config(cfg: ExperimentConfig) -> str:
    """Config text that ``parse_config`` reads back to an equal config."""
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if f.name in ("hard_range", "context_range"):
            for var in sorted(value):
                lo, hi = value[var]
                lines.append(f"{f.name}.{var} = {lo!r},{hi!r}")
        elif f.name == "pgain":
            lines.append(f"pgain = {';'.join(value)}")
        elif f.name == "methods":
            lines.append(f"methods = {','.join(value)}")
        elif isinstance(value, bool):
            lines.append(f"{f.name} = {'true' if value else 'false'}")
        elif isinstance(value, tuple):
            lines.append(f"{f.name} = {','.join(repr(float(v)) for v in value)}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"

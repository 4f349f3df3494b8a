"""Structural causal models: sampling under policies and Monte Carlo effects.

Sampling is columnar: a draw of ``n`` units is a dict mapping each variable
(in evaluation order) to an array of length ``n``. Each exogenous noise gets
its own child stream of ``SeedSequence(seed)``, so a given seed yields the
same noise draws whatever policy is applied.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .graph import CausalGraph, GraphError, mutilate, parse_graph
from .policy import Dmp

__all__ = [
    "BUILTIN_SCMS",
    "Equation",
    "Gaussian",
    "InsufficientMassError",
    "PredicateError",
    "Scm",
    "TruncatedStdNormal",
    "Uniform",
    "builtin_graph",
    "check_predicate",
    "builtin_scm",
    "estimate_conditional_target_effect",
    "estimate_target_effect",
    "parse_predicate",
    "performance_gain",
    "sample",
    "write_samples_csv",
]


class PredicateError(ValueError):
    """Conditioning set violates the non-descendant requirement."""


class InsufficientMassError(RuntimeError):
    """Too few samples satisfy the conditioning predicate."""


@dataclass(frozen=True)
class Gaussian:
    mean: float = 0.0
    sd: float = 1.0

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(self.mean, self.sd, size=n)


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=n)


@dataclass(frozen=True)
class TruncatedStdNormal:
    """Standard normal restricted to ``[lo, hi]``, drawn by rejection."""

    lo: float
    hi: float

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty(n)
        filled = 0
        while filled < n:
            batch = rng.standard_normal(max(2 * (n - filled), 16))
            batch = batch[(batch >= self.lo) & (batch <= self.hi)][: n - filled]
            out[filled : filled + batch.size] = batch
            filled += batch.size
        return out


@dataclass(frozen=True)
class Equation:
    """``fn(parents, noise)`` maps parent and noise columns to the variable's column."""

    noise: tuple[str, ...]
    fn: Callable[[Mapping[str, np.ndarray], Mapping[str, np.ndarray]], np.ndarray]


class _Restricted(dict):
    def __init__(self, data, allowed, owner):
        super().__init__((k, data[k]) for k in allowed)
        self._owner = owner

    def __missing__(self, key):
        raise GraphError(f"equation for {self._owner} reads {key!r}, which is not among its inputs")


@dataclass(frozen=True)
class Scm:
    graph: CausalGraph
    noises: Mapping[str, object]
    equations: Mapping[str, Equation]
    eval_order: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        g = self.graph
        if set(self.equations) != set(g.nodes):
            raise GraphError("one equation per graph node is required")
        feeds: dict[str, set[str]] = {u: set() for u in self.noises}
        for v, eq in self.equations.items():
            for u in eq.noise:
                if u not in feeds:
                    raise GraphError(f"{v} reads undeclared noise {u!r}")
                feeds[u].add(v)
        shared = {frozenset(vs) for vs in feeds.values() if len(vs) > 1}
        for pair in g.bidirected:
            n_shared = sum(1 for vs in feeds.values() if vs == set(pair))
            if n_shared != 1:
                raise GraphError(f"confounded pair {sorted(pair)} needs exactly one shared noise")
        for vs in shared:
            if len(vs) != 2 or vs not in g.bidirected:
                raise GraphError(f"noise shared by {sorted(vs)} has no matching bidirected edge")
        object.__setattr__(self, "eval_order", g.topological_order)

    @property
    def target(self) -> str:
        return self.graph.target


def _draw_noise(scm: Scm, n: int, rng_seed: int) -> dict[str, np.ndarray]:
    names = sorted(scm.noises)
    streams = np.random.SeedSequence(rng_seed).spawn(len(names))
    return {u: scm.noises[u].draw(np.random.default_rng(s), n) for u, s in zip(names, streams)}


def sample(scm: Scm, policy: Dmp | None, n: int, rng_seed: int) -> dict[str, np.ndarray]:
    """Draw ``n`` units, replacing mechanisms of intervened variables by ``policy``."""
    if n < 1:
        raise ValueError("n must be positive")
    if policy is not None:
        unknown = [x for x in policy.mps.variables if x not in scm.equations]
        unknown += [c for c in policy.mps.contexts if c not in scm.equations]
        if unknown:
            raise GraphError(f"policy references unknown variables {unknown}")
        order = _policy_order(scm, policy)
    else:
        order = scm.eval_order
    noise = _draw_noise(scm, n, rng_seed)
    values: dict[str, np.ndarray] = {}
    intervened = policy.mps.as_dict() if policy is not None else {}
    for v in order:
        if v in intervened:
            ctx = intervened[v]
            if not ctx:
                values[v] = np.full(n, policy.hard_values[v])
            else:
                context = np.column_stack([values[c] for c in ctx])
                values[v] = np.asarray(policy.value(v, context), dtype=float).reshape(n)
        else:
            eq = scm.equations[v]
            parents = _Restricted(values, scm.graph.parents(v), v)
            own_noise = _Restricted(noise, eq.noise, v)
            values[v] = np.broadcast_to(np.asarray(eq.fn(parents, own_noise), dtype=float), (n,)).copy()
    return {v: values[v] for v in order}


def _policy_order(scm: Scm, policy: Dmp) -> tuple[str, ...]:
    return mutilate(scm.graph, policy.mps).topological_order


def estimate_target_effect(scm: Scm, policy: Dmp | None, n_samples: int, rng_seed: int) -> float:
    return float(sample(scm, policy, n_samples, rng_seed)[scm.target].mean())


def parse_predicate(text: str) -> dict[str, tuple[float, float]]:
    """Parse interval constraints such as ``X<0``, ``Age>65`` or ``55<Age<60``.

    Several constraints are joined with ``&``. Bounds are strict.
    """
    bounds: dict[str, tuple[float, float]] = {}
    number = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
    for part in filter(None, (p.strip() for p in text.split("&"))):
        m = re.fullmatch(rf"(?:({number})\s*<\s*)?([A-Za-z_]\w*)\s*(<|>)\s*({number})", part)
        if m is None:
            raise PredicateError(f"cannot parse predicate {part!r}")
        low, var, op, value = m.groups()
        lo, hi = bounds.get(var, (-math.inf, math.inf))
        if op == "<":
            hi = min(hi, float(value))
            if low is not None:
                lo = max(lo, float(low))
        else:
            if low is not None:
                raise PredicateError(f"cannot parse predicate {part!r}")
            lo = max(lo, float(value))
        bounds[var] = (lo, hi)
    if not bounds:
        raise PredicateError("empty predicate")
    return bounds


def format_predicate(predicate: Mapping[str, tuple[float, float]]) -> str:
    parts = []
    for var, (lo, hi) in predicate.items():
        if math.isinf(lo):
            parts.append(f"{var}<{hi:g}")
        elif math.isinf(hi):
            parts.append(f"{var}>{lo:g}")
        else:
            parts.append(f"{lo:g}<{var}<{hi:g}")
    return "&".join(parts)


def check_predicate(scm: Scm, predicate: Mapping[str, tuple[float, float]]) -> None:
    g = scm.graph
    for var in predicate:
        if var not in scm.equations:
            raise PredicateError(f"unknown variable {var!r} in predicate")
        if var == g.target:
            raise PredicateError("cannot condition on the target")
    affected = set(g.intervenable)
    for x in g.intervenable:
        affected |= g.descendants(x)
    bad = sorted(set(predicate) & affected)
    if bad:
        raise PredicateError(f"predicate variables {bad} are intervenable or descend from intervenable ones")


def estimate_conditional_target_effect(
    scm: Scm,
    policy: Dmp | None,
    predicate: Mapping[str, tuple[float, float]],
    n_samples: int,
    rng_seed: int,
    min_acceptance: float = 0.01,
) -> tuple[float, float]:
    """Mean of the target over draws inside the predicate's box.

    Returns ``(estimate, acceptance_fraction)``.
    """
    check_predicate(scm, predicate)
    draws = sample(scm, policy, n_samples, rng_seed)
    keep = np.ones(n_samples, dtype=bool)
    for var, (lo, hi) in predicate.items():
        keep &= (draws[var] > lo) & (draws[var] < hi)
    acceptance = float(keep.mean())
    if acceptance < min_acceptance or not keep.any():
        raise InsufficientMassError(
            f"only {acceptance:.4%} of draws satisfy the predicate (floor {min_acceptance:.2%})"
        )
    return float(draws[scm.target][keep].mean()), acceptance


def performance_gain(
    scm: Scm,
    policy: Dmp,
    predicate: Mapping[str, tuple[float, float]],
    n_samples: int,
    rng_seed: int,
    min_acceptance: float = 0.01,
) -> float:
    """Observational minus interventional conditional target mean.

    Both terms use the same seed, hence the same noise draws.
    """
    obs, _ = estimate_conditional_target_effect(scm, None, predicate, n_samples, rng_seed, min_acceptance)
    itv, _ = estimate_conditional_target_effect(scm, policy, predicate, n_samples, rng_seed, min_acceptance)
    return obs - itv


def write_samples_csv(draws: Mapping[str, np.ndarray], path: str | Path) -> None:
    names = list(draws)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in zip(*(draws[v] for v in names)):
            writer.writerow([repr(float(x)) for x in row])


# Built-in models -------------------------------------------------------------


def builtin_graph(name: str) -> CausalGraph:
    try:
        text = resources.files("fcbo.data").joinpath(f"{name}.graph").read_text()
    except FileNotFoundError:
        raise KeyError(f"no built-in graph {name!r}") from None
    return parse_graph(text)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _chain() -> Scm:
    std = Gaussian(0.0, 1.0)
    return Scm(
        graph=builtin_graph("chain"),
        noises={"U_X": std, "U_W": std, "U_Z": std, "U_Y": std},
        equations={
            "X": Equation(("U_X",), lambda p, u: u["U_X"]),
            "W": Equation(("U_W",), lambda p, u: u["U_W"]),
            "Z": Equation(("U_Z",), lambda p, u: -0.5 * p["X"] + u["U_Z"]),
            "Y": Equation(("U_Y",), lambda p, u: -p["W"] - 3.0 * p["Z"] * p["X"] + u["U_Y"]),
        },
    )


def _health() -> Scm:
    def weight(p, u):
        return (p["BMR"] + 6.8 * p["Age"] - 5.0 * p["Height"]) / (13.7 + p["CI"] * 150.0 / 7716.0)

    def psa(p, u):
        age, bmi, statin, aspirin = p["Age"], p["BMI"], p["Statin"], p["Aspirin"]
        return (
            6.8
            + 0.04 * age
            - 0.15 * bmi
            - 0.6 * statin
            + 0.55 * aspirin
            + _sigmoid(2.2 - 0.05 * age + 0.01 * bmi - 0.04 * statin + 0.02 * aspirin)
            + u["U_PSA"]
        )

    return Scm(
        graph=builtin_graph("health"),
        noises={
            "U_Age": Uniform(55.0, 75.0),
            "U_CI": Uniform(-100.0, 100.0),
            "U_BMR": TruncatedStdNormal(-1.0, 2.0),
            "U_Height": TruncatedStdNormal(-0.5, 0.5),
            # N(0, 0.4) read as mean and variance.
            "U_PSA": Gaussian(0.0, math.sqrt(0.4)),
        },
        equations={
            "Age": Equation(("U_Age",), lambda p, u: u["U_Age"]),
            "CI": Equation(("U_CI",), lambda p, u: u["U_CI"]),
            "BMR": Equation(("U_BMR",), lambda p, u: 1500.0 + 10.0 * u["U_BMR"]),
            "Height": Equation(("U_Height",), lambda p, u: 175.0 + 10.0 * u["U_Height"]),
            "Weight": Equation((), weight),
            "BMI": Equation((), lambda p, u: p["Weight"] / (p["Height"] / 100.0) ** 2),
            "Aspirin": Equation((), lambda p, u: _sigmoid(-8.0 + 0.1 * p["Age"] + 0.03 * p["BMI"])),
            "Statin": Equation((), lambda p, u: _sigmoid(-13.0 + 0.1 * p["Age"] + 0.2 * p["BMI"])),
            "PSA": Equation(("U_PSA",), psa),
        },
    )


def _prop1_case_i() -> Scm:
    return Scm(
        graph=builtin_graph("prop1_case_i"),
        noises={"U_C": Gaussian(0.0, 1.0), "U_X": Gaussian(0.0, 1.0), "U_Y": Gaussian(1.0, 1.0)},
        equations={
            "C": Equation(("U_C",), lambda p, u: u["U_C"]),
            "X": Equation(("U_X",), lambda p, u: p["C"] * u["U_X"]),
            "Y": Equation(("U_Y",), lambda p, u: p["C"] * p["X"] * u["U_Y"]),
        },
    )


def _prop1_case_ii() -> Scm:
    return Scm(
        graph=builtin_graph("prop1_case_ii"),
        noises={"U_CY": Gaussian(0.0, 1.0), "U_X": Gaussian(0.0, 1.0), "U_Y": Gaussian(1.0, 1.0)},
        equations={
            "C": Equation(("U_CY",), lambda p, u: u["U_CY"]),
            "X": Equation(("U_X",), lambda p, u: p["C"] * u["U_X"]),
            "Y": Equation(("U_CY", "U_Y"), lambda p, u: u["U_CY"] * p["X"] * u["U_Y"]),
        },
    )


BUILTIN_SCMS = {
    "chain": _chain,
    "health": _health,
    "prop1_case_i": _prop1_case_i,
    "prop1_case_ii": _prop1_case_ii,
}


def builtin_scm(name: str) -> Scm:
    try:
        factory = BUILTIN_SCMS[name]
    except KeyError:
        raise KeyError(f"unknown SCM {name!r}; choose from {sorted(BUILTIN_SCMS)}") from None
    return factory()

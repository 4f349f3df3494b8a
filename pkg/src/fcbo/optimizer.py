"""The fCBO loop: per-scope GP surrogates, cost-normalised EI, grid search.

Baselines reuse the same loop on a restricted set of scopes: ``cbo`` keeps
the hard-only scopes, ``bo`` the single scope hard-intervening on every
intervenable variable, and ``bfo`` the single scope giving every
intervenable variable with parents its parents as context.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .graph import CausalGraph, Mps, is_valid_mps, nrmps_reduce
from .policy import Dmp, FunctionalKernelSpec, format_policy, parse_policy, policy_cost, sample_random_dmp
from .scm import Scm, builtin_scm, estimate_target_effect, sample
from .surrogate import GpSurrogate, MixedInput

__all__ = [
    "METHODS",
    "RunConfig",
    "RunResult",
    "RunState",
    "TrialRecord",
    "derive_seed",
    "fei",
    "fei_values",
    "format_run_state",
    "generate_candidates",
    "make_context_sampler",
    "parse_run_state",
    "run",
    "scopes_for_method",
    "select_intervention",
]

METHODS = ("fcbo", "cbo", "bo", "bfo")
COST_KINDS = ("scope-size", "area", "mean-area")


def derive_seed(base: int, *keys) -> int:
    """Deterministic child seed from a base seed and a path of labels."""
    words = [int(base)]
    for key in keys:
        if isinstance(key, str):
            words.extend(key.encode())
        else:
            words.append(int(key))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass(frozen=True)
class RunConfig:
    scm_name: str = "chain"
    method: str = "fcbo"
    trials: int = 50
    samples_per_trial: int = 1000
    grid_size: int = 10
    hard_ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    coeff_range: tuple[float, float] = (-0.27, 0.27)
    n_anchors: int = 10
    cost_kind: str = "scope-size"
    context_ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    cost_grid_points: int = 50
    func_kernel: str = "linear"
    func_hyper: tuple[float, ...] = (1.0,)
    cross_task_rule: str = "zero"
    theta_hard: tuple[float, float] = (1.0, 1.0)
    theta_func: tuple[float, float] = (7000.0, 20.0)
    noise_variance: float = 1e-4
    context_pool_size: int = 1000
    literal_fei: bool = False
    rng_seed: int = 0

    def validate(self) -> list[str]:
        """Every problem with this config (empty list when valid)."""
        errors = []
        if self.method not in METHODS:
            errors.append(f"method must be one of {METHODS}, got {self.method!r}")
        if self.trials < 1:
            errors.append("trials must be >= 1")
        if self.samples_per_trial < 1:
            errors.append("samples_per_trial must be >= 1")
        if self.grid_size < 2:
            errors.append("grid_size must be >= 2")
        if self.n_anchors < 1:
            errors.append("n_anchors must be >= 1")
        if self.cost_kind not in COST_KINDS:
            errors.append(f"cost_kind must be one of {COST_KINDS}")
        if self.cost_grid_points < 2:
            errors.append("cost_grid_points must be >= 2")
        if self.context_pool_size < self.n_anchors:
            errors.append("context_pool_size must be at least n_anchors")
        if not self.coeff_range[0] <= self.coeff_range[1]:
            errors.append(f"empty coeff_range {self.coeff_range}")
        for name, (lo, hi) in {**self.hard_ranges, **self.context_ranges}.items():
            if not lo <= hi:
                errors.append(f"empty range for {name}: ({lo}, {hi})")
        for label, theta in (("theta_hard", self.theta_hard), ("theta_func", self.theta_func)):
            if len(theta) != 2 or min(theta) <= 0:
                errors.append(f"{label} needs two positive values")
        if self.noise_variance <= 0:
            errors.append("noise_variance must be positive")
        return errors


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    mps_id: int
    policy_id: int
    mu_hat: float
    best_so_far: float
    cost: float
    wall_ms: float


@dataclass
class RunState:
    scopes: list[Mps]
    surrogates: dict[Mps, GpSurrogate]
    datasets: dict[Mps, list[tuple[Dmp, float]]]
    incumbent: tuple[Mps, Dmp, float] | None = None
    trial_log: list[TrialRecord] = field(default_factory=list)
    n_evaluations: int = 0

    def record(self, mps: Mps, d: Dmp, mu_hat: float) -> int:
        self.datasets[mps].append((d, mu_hat))
        self.surrogates[mps] = self.surrogates[mps].update(MixedInput.from_dmp(d), mu_hat)
        if self.incumbent is None or mu_hat < self.incumbent[2]:
            self.incumbent = (mps, d, mu_hat)
        self.n_evaluations += 1
        return self.n_evaluations - 1


@dataclass(frozen=True)
class RunResult:
    incumbent: tuple[Mps, Dmp, float]
    trial_log: list[TrialRecord]
    state: RunState


def fei_values(mean, variance, g_star: float, cost, literal: bool = False) -> np.ndarray:
    """Cost-normalised expected improvement for minimisation, vectorised.

    ``literal=True`` evaluates the alternative reading with a variance
    prefactor and ``gamma = (m - g*) / variance``, kept for comparison only.
    """
    mean = np.asarray(mean, dtype=float)
    variance = np.maximum(np.asarray(variance, dtype=float), 0.0)
    cost = np.broadcast_to(np.asarray(cost, dtype=float), mean.shape)
    if np.any(cost <= 0):
        raise ValueError("cost must be positive")
    sd = np.sqrt(variance)
    ok = sd >= 1e-12
    out = np.zeros(mean.shape)
    if literal:
        gamma = (mean[ok] - g_star) / variance[ok]
        out[ok] = variance[ok] * (gamma * norm.cdf(gamma) + norm.pdf(gamma))
    else:
        gamma = (g_star - mean[ok]) / sd[ok]
        out[ok] = sd[ok] * (gamma * norm.cdf(gamma) + norm.pdf(gamma))
    return np.maximum(out, 0.0) / cost


def fei(gp: GpSurrogate, candidate: Dmp, g_star: float, cost: float, literal: bool = False) -> float:
    mean, variance = gp.predict(MixedInput.from_dmp(candidate))
    return float(fei_values(np.array([mean]), np.array([variance]), g_star, np.array([cost]), literal)[0])


def scopes_for_method(g: CausalGraph, method: str) -> list[Mps]:
    if method == "fcbo":
        return nrmps_reduce(g)
    if method == "cbo":
        return [s for s in nrmps_reduce(g) if s.is_hard]
    if method == "bo":
        return [Mps(tuple((x, ()) for x in sorted(g.intervenable)))]
    if method == "bfo":
        pairs = tuple((x, tuple(g.parents(x))) for x in sorted(g.intervenable) if g.parents(x))
        s = Mps(pairs)
        if not pairs or not is_valid_mps(g, s):
            raise ValueError("no valid all-functional scope with parent contexts")
        return [s]
    raise ValueError(f"unknown method {method!r}")


def make_context_sampler(scm: Scm, pool_size: int, rng_seed: int) -> Callable:
    """Anchor sampler drawing rows (without replacement) from an observational pool."""
    pool = sample(scm, None, pool_size, rng_seed)

    def sampler(names: Sequence[str], n: int, rng: np.random.Generator) -> np.ndarray:
        rows = rng.choice(pool_size, size=n, replace=n > pool_size)
        return np.column_stack([pool[c][rows] for c in names])

    return sampler


def kernel_spec_for(mps: Mps, cfg: RunConfig) -> FunctionalKernelSpec:
    return FunctionalKernelSpec.for_mps(mps, cfg.func_kernel, cfg.func_hyper, cfg.cross_task_rule)


def generate_candidates(mps: Mps, cfg: RunConfig, context_sampler: Callable | None, rng_seed: int) -> list[Dmp]:
    """Hard grid crossed with ``grid_size`` random function vectors.

    An all-hard scope yields ``grid_size ** |hard|`` candidates; with
    functional pairs the random draws add one more axis of ``grid_size``.
    """
    spec = kernel_spec_for(mps, cfg)
    axes = []
    for x in mps.hard_variables:
        lo, hi = cfg.hard_ranges[x]
        axes.append(np.linspace(lo, hi, cfg.grid_size))
    grid = list(itertools.product(*axes))
    if not mps.functional_variables:
        return [Dmp(mps, dict(zip(mps.hard_variables, point)), {}, spec) for point in grid]
    rng = np.random.default_rng(rng_seed)
    funcs = [
        sample_random_dmp(mps, spec, cfg.hard_ranges, cfg.coeff_range, cfg.n_anchors, context_sampler, rng).functions
        for _ in range(cfg.grid_size)
    ]
    return [
        Dmp(mps, dict(zip(mps.hard_variables, point)), f, spec) for point in grid for f in funcs
    ]


def _cost(d: Dmp, cfg: RunConfig) -> float:
    return policy_cost(d, cfg.cost_kind, cfg.context_ranges, cfg.cost_grid_points)


def _candidate_costs(candidates: Sequence[Dmp], cfg: RunConfig) -> np.ndarray:
    """Costs of a candidate pool, integrating each shared function vector once."""
    if cfg.cost_kind == "scope-size":
        return np.array([_cost(d, cfg) for d in candidates])
    func_part: dict[tuple, float] = {}
    out = np.empty(len(candidates))
    for i, d in enumerate(candidates):
        key = tuple(id(f) for f in d.function_vector)
        if key not in func_part:
            func_part[key] = _cost(d, cfg) - sum(d.hard_values.values())
        out[i] = func_part[key] + sum(d.hard_values.values())
    return out


def select_intervention(state: RunState, cfg: RunConfig, context_sampler: Callable | None, rng_seed: int):
    """Global argmax of fEI over every candidate of every scope.

    Ties go to the earlier scope, then the earlier candidate.
    """
    g_star = state.incumbent[2]
    best = None
    for idx, mps in enumerate(state.scopes):
        candidates = generate_candidates(mps, cfg, context_sampler, derive_seed(rng_seed, idx))
        mean, var = state.surrogates[mps].predict_many([MixedInput.from_dmp(d) for d in candidates])
        costs = _candidate_costs(candidates, cfg)
        scores = fei_values(mean, var, g_star, costs, cfg.literal_fei)
        k = int(np.argmax(scores))
        if best is None or scores[k] > best[0]:
            best = (float(scores[k]), idx, candidates[k], float(costs[k]))
    _, idx, choice, cost = best
    return state.scopes[idx], choice, cost


def initial_state(cfg: RunConfig, scm: Scm, context_sampler: Callable | None) -> RunState:
    scopes = scopes_for_method(scm.graph, cfg.method)
    surrogates = {}
    for mps in scopes:
        theta = cfg.theta_hard if mps.is_hard else cfg.theta_func
        surrogates[mps] = GpSurrogate(mps, theta, kernel_spec_for(mps, cfg), cfg.noise_variance)
    state = RunState(scopes, surrogates, {mps: [] for mps in scopes})
    for idx, mps in enumerate(scopes):
        d = sample_random_dmp(
            mps,
            kernel_spec_for(mps, cfg),
            cfg.hard_ranges,
            cfg.coeff_range,
            cfg.n_anchors,
            context_sampler,
            derive_seed(cfg.rng_seed, "init", idx),
        )
        mu = estimate_target_effect(scm, d, cfg.samples_per_trial, derive_seed(cfg.rng_seed, "init-eval", idx))
        state.record(mps, d, mu)
    return state


def run(cfg: RunConfig, scm: Scm | None = None, record_timing: bool = False) -> RunResult:
    """Run ``cfg.trials`` trials of the loop; see the module docstring for methods.

    ``wall_ms`` is logged as 0 unless ``record_timing`` is set, which keeps
    trial logs byte-reproducible.
    """
    errors = cfg.validate()
    if errors:
        raise ValueError("invalid run config: " + "; ".join(errors))
    scm = scm or builtin_scm(cfg.scm_name)
    sampler = make_context_sampler(scm, cfg.context_pool_size, derive_seed(cfg.rng_seed, "pool"))
    state = initial_state(cfg, scm, sampler)
    for t in range(1, cfg.trials + 1):
        start = time.perf_counter()
        mps, d, cost = select_intervention(state, cfg, sampler, derive_seed(cfg.rng_seed, "select", t))
        mu = estimate_target_effect(scm, d, cfg.samples_per_trial, derive_seed(cfg.rng_seed, "trial", t))
        policy_id = state.record(mps, d, mu)
        wall = (time.perf_counter() - start) * 1000.0 if record_timing else 0.0
        state.trial_log.append(
            TrialRecord(t, state.scopes.index(mps), policy_id, mu, state.incumbent[2], cost, wall)
        )
    return RunResult(state.incumbent, list(state.trial_log), state)


# Run-state dumps --------------------------------------------------------------


def format_run_state(state: RunState) -> str:
    """Text dump: one block per scope with GP settings and its dataset."""
    lines = []
    for idx, mps in enumerate(state.scopes):
        gp = state.surrogates[mps]
        lines.append(f"scope {idx} {mps}")
        lines.append(f"theta {gp.theta[0]!r} {gp.theta[1]!r}")
        lines.append(f"noise_variance {gp.noise_variance!r}")
        for d, mu in state.datasets[mps]:
            lines.append(f"entry mu_hat={float(mu)!r}")
            lines.extend("  " + row for row in format_policy(d).splitlines())
        lines.append("end")
    return "\n".join(lines) + "\n"


def parse_run_state(text: str) -> RunState:
    scopes, surrogates, datasets = [], {}, {}
    incumbent = None
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        if not line.startswith("scope "):
            raise ValueError(f"run-state line {i + 1}: expected a scope block")
        mps = Mps.parse(line.split(" ", 2)[2])
        theta = tuple(float(v) for v in lines[i + 1].split()[1:])
        noise = float(lines[i + 2].split()[1])
        i += 3
        entries = []
        while lines[i] != "end":
            mu = float(lines[i].split("=", 1)[1])
            i += 1
            body = []
            while lines[i].startswith("  "):
                body.append(lines[i][2:])
                i += 1
            entries.append((parse_policy("\n".join(body)), mu))
        i += 1
        spec = entries[0][0].kernel if entries else FunctionalKernelSpec.for_mps(mps)
        gp = GpSurrogate(
            mps,
            theta,
            spec,
            noise,
            tuple(MixedInput.from_dmp(d) for d, _ in entries),
            np.array([mu for _, mu in entries]),
        )
        scopes.append(mps)
        surrogates[mps] = gp
        datasets[mps] = entries
        for d, mu in entries:
            if incumbent is None or mu < incumbent[2]:
                incumbent = (mps, d, mu)
    return RunState(scopes, surrogates, datasets, incumbent, [], sum(len(v) for v in datasets.values()))

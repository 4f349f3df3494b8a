"""Deterministic mixed policies with functions in representer form.

A functional intervention ``X = pi(C_X)`` is stored as anchors ``c_i`` and
coefficients ``a_i`` so that ``pi(c) = sum_i a_i k(c_i, c)``. Every function
of a scope gets a task index; the functional-intervention kernel couples
(context, task) pairs, which makes distances between whole policies exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .graph import Mps

__all__ = [
    "CROSS_TASK_RULES",
    "Dmp",
    "FunctionalKernelSpec",
    "NegativeDoseError",
    "RkhsFunction",
    "TaskKernel",
    "distance_sq",
    "evaluate",
    "format_policy",
    "inner_product",
    "kernel_eval",
    "packed_inner_products",
    "pack_functions",
    "parse_policy",
    "policy_cost",
    "sample_random_dmp",
]

FAMILIES = {"linear": 1, "rbf": 2, "reciprocal": 1}
CROSS_TASK_RULES = ("zero", "omega", "two-term")


class NegativeDoseError(ValueError):
    """Area cost met a negative intervention value."""


def _as_points(x, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dim == 1 else arr.reshape(1, -1)
    if dim is not None and arr.shape[-1] != dim:
        raise ValueError(f"expected context dimension {dim}, got {arr.shape[-1]}")
    return arr


@dataclass(frozen=True)
class TaskKernel:
    """Scalar kernel for one task.

    ``linear``: ``scale * <c, c'>``; ``rbf``: ``variance * exp(-|c-c'|^2 / 2l^2)``
    with ``hyper = (variance, lengthscale)``; ``reciprocal``: linear kernel on
    the features ``1/c``.
    """

    family: str
    hyper: tuple[float, ...]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        hyper = tuple(float(h) for h in np.atleast_1d(self.hyper))
        if len(hyper) != FAMILIES[self.family]:
            raise ValueError(f"{self.family} kernel takes {FAMILIES[self.family]} hyperparameter(s)")
        if any(not h > 0 for h in hyper):
            raise ValueError("kernel hyperparameters must be positive")
        object.__setattr__(self, "hyper", hyper)

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Kernel matrix between point sets ``a`` (..., d) and ``b`` (..., d)."""
        if self.family == "linear":
            return self.hyper[0] * (a @ np.swapaxes(b, -1, -2))
        if self.family == "reciprocal":
            if np.any(a == 0) or np.any(b == 0):
                raise ValueError("reciprocal kernel is undefined at a zero context value")
            return self.hyper[0] * ((1.0 / a) @ np.swapaxes(1.0 / b, -1, -2))
        variance, lengthscale = self.hyper
        sq = _sq_dists(a, b)
        return variance * np.exp(-0.5 * sq / lengthscale**2)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...d,...d->...", diff, diff)


@dataclass(frozen=True)
class FunctionalKernelSpec:
    """Multi-task kernel over ``(context, task)`` points.

    ``rule="zero"`` (default) gives zero covariance across tasks and uses each
    task's own kernel on its own context coordinates. ``"omega"`` is an RBF
    with ``(gamma, lengthscale)`` on contexts embedded in the union context
    space, where each task's mask zeroes the coordinates it does not read.
    ``"two-term"`` adds an indicator-gated cross-task RBF with
    ``(gamma_tilde, lengthscale_tilde)`` to a within-task RBF.

    ``masks[t]`` lists, per union coordinate, whether task ``t + 1`` reads it.
    ``None`` means every task reads every coordinate.
    """

    tasks: tuple[TaskKernel, ...]
    rule: str = "zero"
    masks: tuple[tuple[int, ...], ...] | None = None
    gamma: float = 1.0
    lengthscale: float = 1.0
    gamma_tilde: float = 0.0
    lengthscale_tilde: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.rule not in CROSS_TASK_RULES:
            raise ValueError(f"unknown cross-task rule {self.rule!r}")
        if self.gamma <= 0 or self.lengthscale <= 0 or self.lengthscale_tilde <= 0:
            raise ValueError("gamma and lengthscales must be positive")
        if self.gamma_tilde < 0:
            raise ValueError("gamma_tilde must be non-negative")
        if self.masks is not None:
            masks = tuple(tuple(int(m) for m in row) for row in self.masks)
            if len(masks) != len(self.tasks):
                raise ValueError("one mask per task is required")
            if len({len(row) for row in masks}) > 1:
                raise ValueError("masks must share the union context dimension")
            if any(m not in (0, 1) for row in masks for m in row):
                raise ValueError("mask entries must be 0 or 1")
            object.__setattr__(self, "masks", masks)
        elif self.rule != "zero" and len(self.tasks) > 1:
            raise ValueError(f"rule {self.rule!r} needs per-task masks")

    @classmethod
    def for_mps(
        cls,
        mps: Mps,
        family: str = "rbf",
        hyper: Sequence[float] = (1.0, 1.0),
        rule: str = "zero",
        **cross,
    ) -> FunctionalKernelSpec:
        union = mps.contexts
        masks = tuple(
            tuple(int(c in mps.context(x)) for c in union) for x in mps.functional_variables
        )
        tasks = tuple(TaskKernel(family, tuple(hyper)) for _ in mps.functional_variables)
        return cls(tasks=tasks, rule=rule, masks=masks, **cross)

    def two_term_psd_condition(self, dim: int) -> bool:
        """Sufficient condition for the two-term rule to be positive semidefinite."""
        if self.gamma_tilde == 0:
            return True
        return (
            self.lengthscale_tilde >= self.lengthscale
            and self.gamma_tilde**2 * self.lengthscale_tilde**dim <= self.gamma**2 * self.lengthscale**dim
        )

    def task_dim(self, task: int) -> int | None:
        if self.masks is None:
            return None
        return sum(self.masks[task - 1])

    def embed(self, task: int, coords: np.ndarray) -> np.ndarray:
        """Own-task coordinates -> union coordinates (zeros where masked)."""
        coords = np.asarray(coords, dtype=float)
        if self.masks is None:
            return coords
        mask = np.asarray(self.masks[task - 1], dtype=bool)
        if coords.shape[-1] != mask.sum():
            raise ValueError(f"task {task} expects {mask.sum()} context values, got {coords.shape[-1]}")
        out = np.zeros(coords.shape[:-1] + (mask.size,))
        out[..., mask] = coords
        return out

    def own(self, task: int, embedded: np.ndarray) -> np.ndarray:
        if self.masks is None:
            return embedded
        return embedded[..., np.asarray(self.masks[task - 1], dtype=bool)]

    def point_gram(self, ea: np.ndarray, ta: np.ndarray, eb: np.ndarray, tb: np.ndarray) -> np.ndarray:
        """Kernel between embedded point sets with task labels.

        ``ea`` has shape (n, d) and ``ta`` (n,); task 0 marks padding and only
        ever meets zero coefficients.
        """
        if self.rule == "zero":
            out = np.zeros((len(ta), len(tb)))
            for t, kernel in enumerate(self.tasks, start=1):
                ia, ib = np.flatnonzero(ta == t), np.flatnonzero(tb == t)
                if ia.size and ib.size:
                    out[np.ix_(ia, ib)] = kernel(self.own(t, ea[ia]), self.own(t, eb[ib]))
            return out
        same = ta[:, None] == tb[None, :]
        sq = _sq_dists(ea, eb)
        if self.rule == "omega":
            return self.gamma * np.exp(-0.5 * sq / self.lengthscale**2)
        within = self.gamma**2 * np.exp(-0.5 * sq / self.lengthscale**2)
        across = self.gamma_tilde**2 * np.exp(-0.5 * sq / self.lengthscale_tilde**2)
        return np.where(same, within, across)


def kernel_eval(spec: FunctionalKernelSpec, point_a, point_b) -> float:
    """Scalar kernel value between ``(context, task)`` points.

    Contexts are given in each task's own coordinates; tasks count from 1.
    """
    (ca, ta), (cb, tb) = point_a, point_b
    for t in (ta, tb):
        if not 1 <= t <= len(spec.tasks):
            raise ValueError(f"invalid task index {t}")
    ea = spec.embed(ta, np.atleast_1d(np.asarray(ca, dtype=float)))[None, :]
    eb = spec.embed(tb, np.atleast_1d(np.asarray(cb, dtype=float)))[None, :]
    return float(spec.point_gram(ea, np.array([ta]), eb, np.array([tb]))[0, 0])


@dataclass(frozen=True, eq=False)
class RkhsFunction:
    task_index: int
    anchors: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        anchors = np.array(self.anchors, dtype=float)
        if anchors.ndim == 1:
            anchors = anchors.reshape(-1, 1)
        coefficients = np.array(self.coefficients, dtype=float).reshape(-1)
        if anchors.ndim != 2 or anchors.shape[0] == 0:
            raise ValueError("at least one anchor is required")
        if coefficients.shape[0] != anchors.shape[0]:
            raise ValueError("one coefficient per anchor is required")
        if self.task_index < 1:
            raise ValueError("task indices start at 1")
        anchors.flags.writeable = False
        coefficients.flags.writeable = False
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "coefficients", coefficients)

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    def scaled(self, factor: float) -> RkhsFunction:
        return RkhsFunction(self.task_index, self.anchors, factor * self.coefficients)

    def __eq__(self, other):
        if not isinstance(other, RkhsFunction):
            return NotImplemented
        return (
            self.task_index == other.task_index
            and np.array_equal(self.anchors, other.anchors)
            and np.array_equal(self.coefficients, other.coefficients)
        )

    __hash__ = None


def evaluate(f: RkhsFunction, spec: FunctionalKernelSpec, context) -> float | np.ndarray:
    """Representer expansion of ``f`` with its own task kernel.

    A scalar or 1-D context vector gives a float; an (n, d) array gives n
    values.
    """
    kernel = spec.tasks[f.task_index - 1]
    points = np.asarray(context, dtype=float)
    single = points.ndim <= 1
    if single:
        points = points.reshape(1, -1)
    if points.ndim != 2 or points.shape[1] != f.dim:
        raise ValueError(f"expected context dimension {f.dim}, got shape {np.shape(context)}")
    values = kernel(points, f.anchors) @ f.coefficients
    return float(values[0]) if single else values


def pack_functions(batch: Sequence[Sequence[RkhsFunction]], spec: FunctionalKernelSpec):
    """Stack the points of many function vectors into padded arrays.

    Returns embedded coordinates (N, p, d), task labels (N, p) with 0 for
    padding, and coefficients (N, p) with 0 for padding.
    """
    rows = []
    for funcs in batch:
        coords, tasks, coefs = [], [], []
        for f in funcs:
            coords.append(spec.embed(f.task_index, f.anchors))
            tasks.append(np.full(f.anchors.shape[0], f.task_index))
            coefs.append(f.coefficients)
        rows.append((coords, tasks, coefs))
    width = max((sum(len(c) for c in r[2]) for r in rows), default=0)
    dims = {c.shape[1] for r in rows for c in r[0]}
    if len(dims) > 1:
        raise ValueError("function vectors live in different context spaces")
    dim = dims.pop() if dims else 1
    n = len(rows)
    emb = np.ones((n, width, dim))
    task = np.zeros((n, width), dtype=int)
    coef = np.zeros((n, width))
    for k, (coords, tasks, coefs) in enumerate(rows):
        if not coords:
            continue
        m = sum(len(c) for c in coefs)
        emb[k, :m] = np.concatenate(coords)
        task[k, :m] = np.concatenate(tasks)
        coef[k, :m] = np.concatenate(coefs)
    return emb, task, coef


def packed_inner_products(spec: FunctionalKernelSpec, pack_a, pack_b) -> np.ndarray:
    """All pairwise RKHS inner products between two packed batches, (N, M)."""
    ea, ta, aa = pack_a
    eb, tb, ab = pack_b
    if ea.shape[1] == 0 or eb.shape[1] == 0:
        return np.zeros((ea.shape[0], eb.shape[0]))
    n, p, d = ea.shape
    m, q, _ = eb.shape
    gram = spec.point_gram(ea.reshape(n * p, d), ta.reshape(-1), eb.reshape(m * q, d), tb.reshape(-1))
    gram = gram.reshape(n, p, m, q)
    return np.einsum("ni,nimj,mj->nm", aa, gram, ab)


def _check_tasks(fs: Sequence[RkhsFunction], gs: Sequence[RkhsFunction]) -> None:
    if sorted(f.task_index for f in fs) != sorted(g.task_index for g in gs):
        raise ValueError("function vectors are indexed by different task sets")


def inner_product(fs: Sequence[RkhsFunction], gs: Sequence[RkhsFunction], spec: FunctionalKernelSpec) -> float:
    _check_tasks(fs, gs)
    return float(packed_inner_products(spec, pack_functions([fs], spec), pack_functions([gs], spec))[0, 0])


def distance_sq(fs: Sequence[RkhsFunction], gs: Sequence[RkhsFunction], spec: FunctionalKernelSpec) -> float:
    """Squared RKHS distance ``<f - g, f - g>`` via the triple sum."""
    _check_tasks(fs, gs)
    value = inner_product(fs, fs, spec) + inner_product(gs, gs, spec) - 2.0 * inner_product(fs, gs, spec)
    return max(value, 0.0)


@dataclass(frozen=True, eq=False)
class Dmp:
    """Deterministic mixed policy for ``mps``.

    Task indices follow the order of the scope's functional variables.
    """

    mps: Mps
    hard_values: Mapping[str, float]
    functions: Mapping[str, RkhsFunction]
    kernel: FunctionalKernelSpec
    _tasks: dict = field(init=False, repr=False)

    def __post_init__(self):
        hard = {x: float(v) for x, v in self.hard_values.items()}
        funcs = dict(self.functions)
        if set(hard) != set(self.mps.hard_variables):
            raise ValueError(f"hard values must cover exactly {self.mps.hard_variables}")
        if set(funcs) != set(self.mps.functional_variables):
            raise ValueError(f"functions must cover exactly {self.mps.functional_variables}")
        tasks = {x: t for t, x in enumerate(self.mps.functional_variables, start=1)}
        if len(self.kernel.tasks) != len(tasks):
            raise ValueError("kernel spec needs one task kernel per functional pair")
        for x, f in funcs.items():
            if f.task_index != tasks[x]:
                raise ValueError(f"{x} should carry task index {tasks[x]}, not {f.task_index}")
            if f.dim != len(self.mps.context(x)):
                raise ValueError(f"anchors for {x} must have dimension {len(self.mps.context(x))}")
        object.__setattr__(self, "hard_values", {x: hard[x] for x in self.mps.hard_variables})
        object.__setattr__(self, "functions", {x: funcs[x] for x in self.mps.functional_variables})
        object.__setattr__(self, "_tasks", tasks)

    @property
    def hard_vector(self) -> np.ndarray:
        return np.array([self.hard_values[x] for x in self.mps.hard_variables])

    @property
    def function_vector(self) -> tuple[RkhsFunction, ...]:
        return tuple(self.functions[x] for x in self.mps.functional_variables)

    def value(self, x: str, context: np.ndarray | None = None) -> float | np.ndarray:
        """Intervention value of ``x``; ``context`` is (n, |C_x|) for functions.

        Under cross-task rules the function of ``x`` is the task-``x`` slice of
        the full multi-task expansion, so other tasks' anchors contribute.
        """
        if x in self.hard_values:
            return self.hard_values[x]
        f = self.functions[x]
        points = _as_points(context, f.dim)
        if self.kernel.rule == "zero":
            return evaluate(f, self.kernel, points)
        t = self._tasks[x]
        emb, task, coef = pack_functions([self.function_vector], self.kernel)
        query = self.kernel.embed(t, points)
        gram = self.kernel.point_gram(emb[0], task[0], query, np.full(len(query), t))
        return coef[0] @ gram

    def __eq__(self, other):
        if not isinstance(other, Dmp):
            return NotImplemented
        return (
            self.mps == other.mps
            and self.hard_values == other.hard_values
            and self.functions.keys() == other.functions.keys()
            and all(self.functions[x] == other.functions[x] for x in self.functions)
            and self.kernel == other.kernel
        )

    __hash__ = None


def _trapezoid_grid(bounds: Sequence[tuple[float, float]], grid_points: int):
    axes, weights = [], []
    for lo, hi in bounds:
        pts = np.linspace(lo, hi, grid_points)
        w = np.full(grid_points, (hi - lo) / (grid_points - 1))
        w[[0, -1]] *= 0.5
        axes.append(pts)
        weights.append(w)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(bounds))
    wmesh = np.ones(1)
    for w in weights:
        wmesh = np.outer(wmesh, w).reshape(-1)
    return mesh, wmesh


def policy_cost(
    d: Dmp,
    cost_kind: str = "scope-size",
    ranges: Mapping[str, tuple[float, float]] | None = None,
    grid_points: int = 50,
) -> float:
    """Cost of a policy.

    ``scope-size`` counts pairs. ``area`` adds each hard value to the
    trapezoidal integral of each function over its context box (uniform grid,
    ``grid_points`` per axis, error O(h^2)). ``mean-area`` divides each
    integral by the box volume, i.e. the mean dose over a uniformly spread
    population; hard values count as they are under both area kinds.
    """
    if cost_kind == "scope-size":
        return float(len(d.mps))
    if cost_kind not in ("area", "mean-area"):
        raise ValueError(f"unknown cost kind {cost_kind!r}")
    if grid_points < 2:
        raise ValueError("grid_points must be at least 2")
    ranges = dict(ranges or {})
    total = 0.0
    for x, value in d.hard_values.items():
        if value < 0:
            raise NegativeDoseError(f"negative hard dose {value} for {x}")
        total += value
    for x, f in d.functions.items():
        ctx = d.mps.context(x)
        missing = [c for c in ctx if c not in ranges]
        if missing:
            raise ValueError(f"area cost needs ranges for {missing}")
        bounds = [tuple(map(float, ranges[c])) for c in ctx]
        mesh, weights = _trapezoid_grid(bounds, grid_points)
        values = np.asarray(d.value(x, mesh), dtype=float)
        if np.any(values < 0):
            raise NegativeDoseError(f"{x} takes negative values (min {values.min():.4g}) over its context range")
        integral = float(weights @ values)
        if cost_kind == "mean-area":
            integral /= math.prod(hi - lo for lo, hi in bounds)
        total += integral
    return total


ContextSampler = Callable[[tuple, int, np.random.Generator], np.ndarray]


def sample_random_dmp(
    mps: Mps,
    spec: FunctionalKernelSpec,
    hard_ranges: Mapping[str, tuple[float, float]],
    coeff_range: tuple[float, float],
    n_anchors: int,
    context_sampler: ContextSampler | None,
    rng_seed,
) -> Dmp:
    """Random policy: uniform hard values, anchors from ``context_sampler``,
    uniform coefficients.

    ``context_sampler(names, n, rng)`` returns an (n, len(names)) array,
    normally observational draws of the context variables.
    """
    if n_anchors < 1:
        raise ValueError("n_anchors must be at least 1")
    lo, hi = coeff_range
    if not lo <= hi:
        raise ValueError(f"empty coefficient range {coeff_range}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    hard = {}
    for x in mps.hard_variables:
        if x not in hard_ranges:
            raise ValueError(f"no hard range for {x}")
        a, b = hard_ranges[x]
        if not a <= b:
            raise ValueError(f"empty hard range for {x}: {hard_ranges[x]}")
        hard[x] = float(rng.uniform(a, b))
    funcs = {}
    for t, x in enumerate(mps.functional_variables, start=1):
        if context_sampler is None:
            raise ValueError("functional pairs need a context sampler")
        anchors = np.asarray(context_sampler(mps.context(x), n_anchors, rng), dtype=float)
        coefs = rng.uniform(lo, hi, size=n_anchors)
        funcs[x] = RkhsFunction(t, anchors.reshape(n_anchors, -1), coefs)
    return Dmp(mps, hard, funcs, spec)


# Policy text format ---------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def format_policy(d: Dmp) -> str:
    spec = d.kernel
    lines = [f"mps {d.mps}"]
    rule = f"rule {spec.rule}"
    if spec.rule != "zero":
        rule += f" gamma={_fmt(spec.gamma)} lengthscale={_fmt(spec.lengthscale)}"
        rule += f" gamma_tilde={_fmt(spec.gamma_tilde)} lengthscale_tilde={_fmt(spec.lengthscale_tilde)}"
    lines.append(rule)
    for x, v in d.hard_values.items():
        lines.append(f"hard {x} {_fmt(v)}")
    for x, f in d.functions.items():
        kernel = spec.tasks[f.task_index - 1]
        hyper = ",".join(_fmt(h) for h in kernel.hyper)
        lines.append(f"func {x} task={f.task_index} kernel={kernel.family} hyper={hyper}")
        for anchor, coef in zip(f.anchors, f.coefficients):
            lines.append("anchor " + " ".join(_fmt(c) for c in anchor) + f" coeff {_fmt(coef)}")
    return "\n".join(lines) + "\n"


def parse_policy(text: str) -> Dmp:
    mps = None
    rule = {"rule": "zero"}
    hard: dict[str, float] = {}
    funcs: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, _, rest = line.partition(" ")
        try:
            if keyword == "mps":
                mps = Mps.parse(rest)
            elif keyword == "rule":
                name, *opts = rest.split()
                rule = {"rule": name, **{k: float(v) for k, v in (o.split("=", 1) for o in opts)}}
            elif keyword == "hard":
                x, value = rest.split()
                hard[x] = float(value)
            elif keyword == "func":
                x, *opts = rest.split()
                kv = dict(o.split("=", 1) for o in opts)
                current = funcs[x] = {
                    "task": int(kv["task"]),
                    "kernel": TaskKernel(kv["kernel"], tuple(float(h) for h in kv["hyper"].split(","))),
                    "anchors": [],
                    "coefs": [],
                }
            elif keyword == "anchor":
                if current is None:
                    raise ValueError("anchor line before any func line")
                coords, _, coef = rest.partition(" coeff ")
                current["anchors"].append([float(c) for c in coords.split()])
                current["coefs"].append(float(coef))
            else:
                raise ValueError(f"unknown keyword {keyword!r}")
        except (KeyError, ValueError) as exc:
            raise ValueError(f"policy line {lineno}: {exc}") from None
    if mps is None:
        raise ValueError("policy file has no mps line")
    order = mps.functional_variables
    missing = [x for x in order if x not in funcs]
    if missing:
        raise ValueError(f"policy file has no func block for {missing}")
    masks = tuple(tuple(int(c in mps.context(x)) for c in mps.contexts) for x in order)
    cross = {k: v for k, v in rule.items() if k != "rule"}
    spec = FunctionalKernelSpec(
        tasks=tuple(funcs[x]["kernel"] for x in order), rule=rule["rule"], masks=masks, **cross
    )
    functions = {
        x: RkhsFunction(b["task"], np.array(b["anchors"]), np.array(b["coefs"])) for x, b in funcs.items()
    }
    return Dmp(mps, hard, functions, spec)

"""Exact GP surrogates over mixed (hard value, RKHS function) inputs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .graph import Mps
from .policy import Dmp, FunctionalKernelSpec, RkhsFunction, pack_functions, packed_inner_products

__all__ = [
    "GpSurrogate",
    "IllConditionedKernelError",
    "MixedInput",
    "mixed_distance_matrix",
    "mixed_distance_sq",
    "outer_kernel",
]

JITTER_START = 1e-8
JITTER_MAX = 1e-2


class IllConditionedKernelError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class MixedInput:
    hard: np.ndarray
    funcs: tuple[RkhsFunction, ...] = ()

    def __post_init__(self):
        hard = np.array(self.hard, dtype=float).reshape(-1)
        hard.flags.writeable = False
        object.__setattr__(self, "hard", hard)
        object.__setattr__(self, "funcs", tuple(self.funcs))

    @classmethod
    def from_dmp(cls, d: Dmp) -> MixedInput:
        return cls(d.hard_vector, d.function_vector)


def _check_partition(a: MixedInput, b: MixedInput) -> None:
    if a.hard.shape != b.hard.shape or [f.task_index for f in a.funcs] != [f.task_index for f in b.funcs]:
        raise ValueError("mixed inputs belong to different scope partitions")


def mixed_distance_sq(a: MixedInput, b: MixedInput, spec: FunctionalKernelSpec) -> float:
    """Squared Euclidean distance of hard parts plus squared RKHS distance of functions."""
    _check_partition(a, b)
    return float(mixed_distance_matrix([a], [b], spec)[0, 0])


def _self_norms(spec: FunctionalKernelSpec, pack) -> np.ndarray:
    emb, task, coef = pack
    out = np.empty(len(coef))
    for k in range(len(coef)):
        one = (emb[k : k + 1], task[k : k + 1], coef[k : k + 1])
        out[k] = packed_inner_products(spec, one, one)[0, 0]
    return out


class _Packed:
    """Hard matrix plus packed functions and their squared norms."""

    def __init__(self, inputs: Sequence[MixedInput], spec: FunctionalKernelSpec):
        self.hard = np.array([x.hard for x in inputs], dtype=float).reshape(len(inputs), -1)
        self.has_funcs = any(x.funcs for x in inputs)
        if self.has_funcs:
            self.pack = pack_functions([x.funcs for x in inputs], spec)
            self.norms = _self_norms(spec, self.pack)


def _distances(a: _Packed, b: _Packed, spec: FunctionalKernelSpec) -> np.ndarray:
    diff = a.hard[:, None, :] - b.hard[None, :, :]
    out = np.einsum("nmd,nmd->nm", diff, diff)
    if a.has_funcs or b.has_funcs:
        if not (a.has_funcs and b.has_funcs):
            raise ValueError("mixed inputs belong to different scope partitions")
        cross = packed_inner_products(spec, a.pack, b.pack)
        out = out + np.maximum(a.norms[:, None] + b.norms[None, :] - 2.0 * cross, 0.0)
    return out


def mixed_distance_matrix(
    a: Sequence[MixedInput], b: Sequence[MixedInput], spec: FunctionalKernelSpec
) -> np.ndarray:
    return _distances(_Packed(a, spec), _Packed(b, spec), spec)


def outer_kernel(a: MixedInput, b: MixedInput, theta: tuple[float, float], spec: FunctionalKernelSpec) -> float:
    signal_variance, lengthscale = theta
    return float(signal_variance * np.exp(-mixed_distance_sq(a, b, spec) / (2.0 * lengthscale**2)))


@dataclass(frozen=True, eq=False)
class GpSurrogate:
    """Zero-mean GP over one scope's policies, refit exactly after each update.

    ``theta = (signal_variance, lengthscale)`` of the RBF on the mixed
    distance; ``kernel_spec`` supplies the RKHS part of that distance.
    """

    mps: Mps
    theta: tuple[float, float]
    kernel_spec: FunctionalKernelSpec
    noise_variance: float = 1e-4
    inputs: tuple[MixedInput, ...] = ()
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jitter: float = field(init=False, default=0.0)
    clamp_events: list = field(init=False, repr=False, default_factory=list)

    def __post_init__(self):
        signal_variance, lengthscale = (float(v) for v in self.theta)
        if signal_variance <= 0 or lengthscale <= 0 or self.noise_variance <= 0:
            raise ValueError("signal variance, lengthscale and noise variance must be positive")
        targets = np.array(self.targets, dtype=float).reshape(-1)
        if len(targets) != len(self.inputs):
            raise ValueError("one target per training input is required")
        object.__setattr__(self, "theta", (signal_variance, lengthscale))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "targets", targets)
        self._factorize()

    def _check_input(self, x: MixedInput) -> None:
        n_hard = len(self.mps.hard_variables)
        tasks = list(range(1, len(self.mps.functional_variables) + 1))
        if x.hard.shape != (n_hard,) or [f.task_index for f in x.funcs] != tasks:
            raise ValueError(f"input does not match scope {self.mps}")

    def _kernel(self, dist_sq: np.ndarray) -> np.ndarray:
        signal_variance, lengthscale = self.theta
        return signal_variance * np.exp(-dist_sq / (2.0 * lengthscale**2))

    def _factorize(self) -> None:
        for x in self.inputs:
            self._check_input(x)
        if not self.inputs:
            object.__setattr__(self, "_train", None)
            return
        train = _Packed(self.inputs, self.kernel_spec)
        gram = self._kernel(_distances(train, train, self.kernel_spec))
        gram = 0.5 * (gram + gram.T)
        n = len(self.inputs)
        jitter = 0.0
        while True:
            try:
                chol = cholesky(gram + (self.noise_variance + jitter) * np.eye(n), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
                if jitter > JITTER_MAX:
                    raise IllConditionedKernelError(
                        f"Gram matrix for {self.mps} not positive definite with jitter up to {JITTER_MAX}"
                    ) from None
        object.__setattr__(self, "jitter", jitter)
        object.__setattr__(self, "_train", train)
        object.__setattr__(self, "_gram", gram)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_alpha", cho_solve((chol, True), self.targets))

    @property
    def gram(self) -> np.ndarray:
        """Noise-free training Gram matrix."""
        return self._gram

    def update(self, x: MixedInput, y: float) -> GpSurrogate:
        self._check_input(x)
        return GpSurrogate(
            self.mps,
            self.theta,
            self.kernel_spec,
            self.noise_variance,
            self.inputs + (x,),
            np.append(self.targets, float(y)),
        )

    def predict_many(self, xs: Sequence[MixedInput]) -> tuple[np.ndarray, np.ndarray]:
        for x in xs:
            self._check_input(x)
        n = len(xs)
        prior = np.full(n, self.theta[0])
        if self._train is None:
            return np.zeros(n), prior
        query = _Packed(xs, self.kernel_spec)
        cross = self._kernel(_distances(query, self._train, self.kernel_spec))
        mean = cross @ self._alpha
        v = solve_triangular(self._chol, cross.T, lower=True)
        var = prior - np.einsum("ij,ij->j", v, v)
        clamped = var < 0
        if clamped.any():
            self.clamp_events.append(int(clamped.sum()))
            var = np.where(clamped, 0.0, var)
        return mean, var

    def predict(self, x: MixedInput) -> tuple[float, float]:
        mean, var = self.predict_many([x])
        return float(mean[0]), float(var[0])

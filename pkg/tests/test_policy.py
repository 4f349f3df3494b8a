import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcbo.graph import Mps
from fcbo.policy import (
    Dmp,
    FunctionalKernelSpec,
    NegativeDoseError,
    RkhsFunction,
    TaskKernel,
    distance_sq,
    evaluate,
    format_policy,
    inner_product,
    kernel_eval,
    parse_policy,
    policy_cost,
    sample_random_dmp,
)

LIN1 = FunctionalKernelSpec((TaskKernel("linear", (1.0,)),))
RBF1 = FunctionalKernelSpec((TaskKernel("rbf", (1.0, 1.0)),))


def two_task_spec(rule, **kw):
    # task 1 reads (C1, C2), task 2 reads only C2
    kernels = (TaskKernel("rbf", (1.0, 1.0)), TaskKernel("rbf", (1.0, 1.0)))
    return FunctionalKernelSpec(kernels, rule=rule, masks=((1, 1), (0, 1)), **kw)


class TestEvaluate:
    def test_linear_single_anchor(self):
        f = RkhsFunction(1, [[1.0]], [2.0])
        assert evaluate(f, LIN1, 3.0) == pytest.approx(6.0)
        np.testing.assert_allclose(evaluate(f, LIN1, np.array([[1.0], [-2.0]])), [2.0, -4.0])

    def test_zero_coefficients(self):
        f = RkhsFunction(1, [[0.3], [1.5]], [0.0, 0.0])
        assert evaluate(f, RBF1, 0.7) == 0.0

    def test_rbf_at_anchor(self):
        spec = FunctionalKernelSpec((TaskKernel("rbf", (2.5, 0.7)),))
        f = RkhsFunction(1, [[0.4, -1.0]], [3.0])
        assert evaluate(f, spec, [0.4, -1.0]) == pytest.approx(7.5)

    def test_dimension_mismatch(self):
        f = RkhsFunction(1, [[0.4, -1.0]], [3.0])
        with pytest.raises(ValueError):
            evaluate(f, RBF1, [1.0, 2.0, 3.0])

    def test_reciprocal_kernel(self):
        spec = FunctionalKernelSpec((TaskKernel("reciprocal", (1.0,)),))
        f = RkhsFunction(1, [[1.0]], [-1.0])
        assert evaluate(f, spec, 4.0) == pytest.approx(-0.25)
        with pytest.raises(ValueError):
            evaluate(f, spec, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_linear_in_coefficients(self, seed):
        rng = np.random.default_rng(seed)
        f1 = RkhsFunction(1, rng.normal(size=(3, 2)), rng.normal(size=3))
        f2 = RkhsFunction(1, rng.normal(size=(4, 2)), rng.normal(size=4))
        both = RkhsFunction(1, np.vstack([f1.anchors, f2.anchors]), np.concatenate([f1.coefficients, f2.coefficients]))
        spec = FunctionalKernelSpec((TaskKernel("rbf", (1.3, 0.8)),))
        x = rng.normal(size=(5, 2))
        np.testing.assert_allclose(evaluate(both, spec, x), evaluate(f1, spec, x) + evaluate(f2, spec, x), atol=1e-12)


class TestKernelEval:
    def test_cross_task_zero(self):
        assert kernel_eval(two_task_spec("zero"), ([0.1, 0.2], 1), ([0.2], 2)) == 0.0

    def test_same_task_rbf_identical(self):
        assert kernel_eval(RBF1, ([0.3], 1), ([0.3], 1)) == pytest.approx(1.0)

    def test_omega_example(self):
        gamma, ell = 1.7, 0.9
        spec = two_task_spec("omega", gamma=gamma, lengthscale=ell)
        c1, c2, d2 = 0.4, -0.3, 0.8
        expected = gamma * math.exp(-0.5 / ell**2 * (c1**2 + (c2 - d2) ** 2))
        assert kernel_eval(spec, ([c1, c2], 1), ([d2], 2)) == pytest.approx(expected)

    def test_invalid_task(self):
        with pytest.raises(ValueError):
            kernel_eval(RBF1, ([0.3], 2), ([0.3], 1))


def _random_points(rng, n):
    points = []
    for _ in range(n):
        t = int(rng.integers(1, 3))
        points.append((rng.normal(size=2 if t == 1 else 1), t))
    return points


@pytest.mark.parametrize(
    "rule, kw",
    [
        ("zero", {}),
        ("omega", {"gamma": 1.5, "lengthscale": 0.7}),
        ("two-term", {"gamma": 1.2, "lengthscale": 0.8, "gamma_tilde": 0.6, "lengthscale_tilde": 1.1}),
    ],
)
def test_gram_psd(rule, kw):
    spec = two_task_spec(rule, **kw)
    assert spec.two_term_psd_condition(2)
    rng = np.random.default_rng(7)
    for _ in range(20):
        pts = _random_points(rng, int(rng.integers(2, 41)))
        K = np.array([[kernel_eval(spec, p, q) for q in pts] for p in pts])
        assert np.max(np.abs(K - K.T)) <= 1e-12
        assert np.linalg.eigvalsh(K).min() >= -1e-9


class TestDistances:
    def test_identity(self):
        f = RkhsFunction(1, [[0.2], [0.9]], [1.0, -0.5])
        assert distance_sq([f], [f], RBF1) == 0.0

    def test_hand_value(self):
        f = RkhsFunction(1, [[1.0]], [2.0])
        zero = RkhsFunction(1, [[1.0]], [0.0])
        assert distance_sq([f], [zero], LIN1) == pytest.approx(4.0)

    def test_scaled_by_two(self):
        f = RkhsFunction(1, [[0.2], [0.9]], [1.0, -0.5])
        zero = f.scaled(0.0)
        assert distance_sq([f.scaled(2.0)], [zero], RBF1) == pytest.approx(4 * distance_sq([f], [zero], RBF1))

    def test_task_mismatch(self):
        spec = two_task_spec("zero")
        f = RkhsFunction(1, [[0.2, 0.1]], [1.0])
        g = RkhsFunction(2, [[0.2]], [1.0])
        with pytest.raises(ValueError):
            distance_sq([f], [g], spec)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
    def test_symmetry_and_scaling(self, seed, a):
        rng = np.random.default_rng(seed)
        spec = two_task_spec("zero")
        fs = [RkhsFunction(1, rng.normal(size=(3, 2)), rng.normal(size=3)), RkhsFunction(2, rng.normal(size=(2, 1)), rng.normal(size=2))]
        gs = [RkhsFunction(1, rng.normal(size=(2, 2)), rng.normal(size=2)), RkhsFunction(2, rng.normal(size=(4, 1)), rng.normal(size=4))]
        d = distance_sq(fs, gs, spec)
        assert d >= 0
        assert d == pytest.approx(distance_sq(gs, fs, spec), rel=1e-9, abs=1e-12)
        scaled = distance_sq([f.scaled(a) for f in fs], [g.scaled(a) for g in gs], spec)
        assert scaled == pytest.approx(a * a * d, rel=1e-9, abs=1e-9)

    def test_inner_product_bilinear(self):
        f = RkhsFunction(1, [[0.5]], [1.5])
        g = RkhsFunction(1, [[-0.5]], [2.0])
        assert inner_product([f], [g], LIN1) == pytest.approx(1.5 * 2.0 * (0.5 * -0.5))


def _dmp_statin(fn: RkhsFunction, spec=None):
    mps = Mps.of({"Statin": ["Age", "BMI"]})
    spec = spec or FunctionalKernelSpec.for_mps(mps, "rbf", (1.0, 1.0))
    return Dmp(mps, {}, {"Statin": fn}, spec)


class TestCost:
    def test_scope_size(self):
        mps = Mps.of({"W": [], "Z": []})
        d = Dmp(mps, {"W": 1.0, "Z": -1.0}, {}, FunctionalKernelSpec.for_mps(mps))
        assert policy_cost(d) == 2.0

    def test_reciprocal_area(self):
        # f(c) = 1/c over [1, 2] integrates to log 2
        mps = Mps.of({"X": ["C"]})
        spec = FunctionalKernelSpec.for_mps(mps, "reciprocal", (1.0,))
        d = Dmp(mps, {}, {"X": RkhsFunction(1, [[1.0]], [1.0])}, spec)
        assert policy_cost(d, "area", {"C": (1.0, 2.0)}, 400) == pytest.approx(math.log(2.0), abs=1e-5)

    def test_box_area(self):
        # an RBF with huge lengthscale is numerically constant: area = 20 * (b1 - b0)
        spec = FunctionalKernelSpec.for_mps(Mps.of({"Statin": ["Age", "BMI"]}), "rbf", (1.0, 1e9))
        d = _dmp_statin(RkhsFunction(1, [[60.0, 25.0]], [1.0]), spec)
        assert policy_cost(d, "area", {"Age": (55, 75), "BMI": (20, 30)}) == pytest.approx(200.0, rel=1e-9)
        assert policy_cost(d, "mean-area", {"Age": (55, 75), "BMI": (20, 30)}) == pytest.approx(1.0, rel=1e-9)

    def test_linear_identity_area(self):
        mps = Mps.of({"X": ["C"]})
        d = Dmp(mps, {}, {"X": RkhsFunction(1, [[1.0]], [1.0])}, FunctionalKernelSpec.for_mps(mps, "linear", (1.0,)))
        # trapezoid is exact for linear integrands
        assert policy_cost(d, "area", {"C": (0.0, 1.0)}) == pytest.approx(0.5, abs=1e-12)

    def test_hard_values_add(self):
        mps = Mps.of({"Aspirin": [], "Statin": []})
        d = Dmp(mps, {"Aspirin": 0.1, "Statin": 1.0}, {}, FunctionalKernelSpec.for_mps(mps))
        assert policy_cost(d, "area", {}) == pytest.approx(1.1)

    def test_negative_dose(self):
        mps = Mps.of({"X": ["C"]})
        d = Dmp(mps, {}, {"X": RkhsFunction(1, [[1.0]], [1.0])}, FunctionalKernelSpec.for_mps(mps, "linear", (1.0,)))
        with pytest.raises(NegativeDoseError):
            policy_cost(d, "area", {"C": (-1.0, 1.0)})

    def test_missing_range(self):
        d = _dmp_statin(RkhsFunction(1, [[60.0, 25.0]], [1.0]))
        with pytest.raises(ValueError):
            policy_cost(d, "area", {"Age": (55, 75)})

    def test_monotone(self):
        ranges = {"Age": (55, 75), "BMI": (20, 30)}
        low = _dmp_statin(RkhsFunction(1, [[60.0, 25.0], [70.0, 22.0]], [0.5, 1.0]))
        high = _dmp_statin(RkhsFunction(1, [[60.0, 25.0], [70.0, 22.0]], [0.9, 1.2]))
        assert policy_cost(low, "area", ranges) <= policy_cost(high, "area", ranges)


class TestDmp:
    def test_partition_enforced(self):
        mps = Mps.of({"W": [], "Z": ["X"]})
        spec = FunctionalKernelSpec.for_mps(mps, "linear", (1.0,))
        with pytest.raises(ValueError):
            Dmp(mps, {}, {"Z": RkhsFunction(1, [[1.0]], [1.0])}, spec)
        with pytest.raises(ValueError):
            Dmp(mps, {"W": 1.0}, {"Z": RkhsFunction(2, [[1.0]], [1.0])}, spec)

    def test_random_is_seeded(self):
        mps = Mps.of({"W": [], "Z": ["X"]})
        spec = FunctionalKernelSpec.for_mps(mps, "linear", (1.0,))

        def sampler(names, n, rng):
            return rng.normal(size=(n, len(names)))

        a = sample_random_dmp(mps, spec, {"W": (-1, 1)}, (-0.27, 0.27), 10, sampler, 5)
        b = sample_random_dmp(mps, spec, {"W": (-1, 1)}, (-0.27, 0.27), 10, sampler, 5)
        assert a == b
        assert -1 <= a.hard_values["W"] <= 1
        assert np.all(np.abs(a.functions["Z"].coefficients) <= 0.27)
        assert a.functions["Z"].anchors.shape == (10, 1)

    def test_empty_range(self):
        mps = Mps.of({"W": []})
        with pytest.raises(ValueError):
            sample_random_dmp(mps, FunctionalKernelSpec.for_mps(mps), {"W": (1, -1)}, (0, 1), 3, None, 0)

    def test_cross_task_value_uses_all_anchors(self):
        mps = Mps.of({"A": ["C1", "C2"], "B": ["C2"]})
        spec = FunctionalKernelSpec.for_mps(mps, "rbf", (1.0, 1.0), "omega", gamma=1.0, lengthscale=1.0)
        d = Dmp(mps, {}, {"A": RkhsFunction(1, [[0.0, 0.0]], [0.0]), "B": RkhsFunction(2, [[0.5]], [1.0])}, spec)
        # A's own coefficient is zero but B's anchor reaches it through the shared coordinate
        assert d.value("A", np.array([[0.0, 0.5]]))[0] == pytest.approx(1.0)


class TestPolicyFile:
    @pytest.mark.parametrize("rule", ["zero", "omega", "two-term"])
    def test_roundtrip(self, rule):
        mps = Mps.of({"Aspirin": ["Age", "BMI"], "Statin": ["Age", "BMI"], "CI": []})
        cross = {} if rule == "zero" else {"gamma": 1.1, "lengthscale": 0.9, "gamma_tilde": 0.3, "lengthscale_tilde": 1.4}
        spec = FunctionalKernelSpec.for_mps(mps, "rbf", (1.0, 2.0), rule, **cross)
        rng = np.random.default_rng(0)
        d = Dmp(
            mps,
            {"CI": 0.123456789},
            {
                "Aspirin": RkhsFunction(1, rng.normal(size=(3, 2)), rng.normal(size=3)),
                "Statin": RkhsFunction(2, rng.normal(size=(2, 2)), rng.normal(size=2)),
            },
            spec,
        )
        assert parse_policy(format_policy(d)) == d

    def test_bad_line(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_policy("mps {<W|>}\nbogus 1\n")

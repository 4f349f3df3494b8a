import math

import numpy as np
import pytest

from fcbo.graph import CausalGraph, GraphError, Mps
from fcbo.policy import Dmp, FunctionalKernelSpec, RkhsFunction
from fcbo.scm import (
    Equation,
    Gaussian,
    InsufficientMassError,
    PredicateError,
    Scm,
    TruncatedStdNormal,
    builtin_scm,
    estimate_conditional_target_effect,
    estimate_target_effect,
    parse_predicate,
    performance_gain,
    sample,
    write_samples_csv,
)


def hard(mapping):
    mps = Mps.of({x: [] for x in mapping})
    return Dmp(mps, mapping, {}, FunctionalKernelSpec.for_mps(mps))


def minus_reciprocal():
    """pi_{X|C}(c) = -1/c in representer form."""
    mps = Mps.of({"X": ["C"]})
    spec = FunctionalKernelSpec.for_mps(mps, "reciprocal", (1.0,))
    return Dmp(mps, {}, {"X": RkhsFunction(1, [[1.0]], [-1.0])}, spec)


def chain_z_linear(slope, w):
    mps = Mps.of({"Z": ["X"], "W": []})
    spec = FunctionalKernelSpec.for_mps(mps, "linear", (1.0,))
    return Dmp(mps, {"W": w}, {"Z": RkhsFunction(1, [[1.0]], [slope])}, spec)


class TestSampling:
    def test_observational_mean_x(self):
        draws = sample(builtin_scm("chain"), None, 100_000, 0)
        assert abs(draws["X"].mean()) < 0.02

    def test_deterministic(self):
        scm = builtin_scm("health")
        a = sample(scm, hard({"Statin": 1.0}), 500, 42)
        b = sample(scm, hard({"Statin": 1.0}), 500, 42)
        assert list(a) == list(b)
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_hard_gives_point_mass(self):
        draws = sample(builtin_scm("chain"), hard({"Z": 0.3, "W": -1.0}), 1000, 1)
        assert np.all(draws["Z"] == 0.3) and np.all(draws["W"] == -1.0)

    def test_chain_hard_substitution(self):
        scm = builtin_scm("chain")
        obs = sample(scm, None, 2000, 9)
        itv = sample(scm, hard({"Z": 0.5, "W": 0.2}), 2000, 9)
        # matched seeds share the noise, so Y = -w - 3zX + U_Y draw by draw
        u_y = obs["Y"] + obs["W"] + 3 * obs["Z"] * obs["X"]
        np.testing.assert_allclose(itv["Y"], -0.2 - 1.5 * itv["X"] + u_y, atol=1e-12)

    def test_prop1_functional_gives_minus_uy(self):
        scm = builtin_scm("prop1_case_i")
        obs = sample(scm, None, 1000, 3)
        itv = sample(scm, minus_reciprocal(), 1000, 3)
        u_y = obs["Y"] / (obs["C"] * obs["X"])
        np.testing.assert_allclose(itv["Y"], -u_y, rtol=1e-9, atol=1e-9)

    def test_non_descendants_unchanged(self):
        scm = builtin_scm("health")
        obs = sample(scm, None, 3000, 11)
        itv = sample(scm, hard({"Statin": 1.0, "Aspirin": 0.1}), 3000, 11)
        for v in ("Age", "BMI", "Weight", "Height", "CI", "BMR"):
            assert np.array_equal(obs[v], itv[v])

    def test_columns_follow_eval_order(self):
        scm = builtin_scm("health")
        assert tuple(sample(scm, None, 5, 0)) == scm.eval_order

    def test_truncated_normal_bounds(self):
        x = TruncatedStdNormal(-0.5, 0.5).draw(np.random.default_rng(0), 20_000)
        assert x.min() > -0.5 and x.max() < 0.5 and abs(x.mean()) < 0.01

    def test_csv_dump(self, tmp_path):
        draws = sample(builtin_scm("chain"), None, 4, 0)
        write_samples_csv(draws, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0].split(",") == list(draws) and len(lines) == 5


class TestScmValidation:
    def test_equation_reads_non_parent(self):
        g = CausalGraph(("A", "Y"), set(), set(), "Y", frozenset())
        scm = Scm(
            g,
            {"U": Gaussian(0, 1)},
            {"A": Equation(("U",), lambda p, u: u["U"]), "Y": Equation((), lambda p, u: p["A"])},
        )
        with pytest.raises(GraphError):
            sample(scm, None, 3, 0)

    def test_bidirected_needs_shared_noise(self):
        g = CausalGraph(("A", "Y"), set(), {frozenset({"A", "Y"})}, "Y", frozenset())
        with pytest.raises(GraphError):
            Scm(
                g,
                {"U": Gaussian(0, 1), "V": Gaussian(0, 1)},
                {"A": Equation(("U",), lambda p, u: u["U"]), "Y": Equation(("V",), lambda p, u: u["V"])},
            )


class TestTargetEffects:
    @pytest.mark.parametrize("x", [-2.0, 0.5, 3.0])
    def test_case_i_hard(self, x):
        assert abs(estimate_target_effect(builtin_scm("prop1_case_i"), hard({"X": x}), 100_000, 0)) < 0.05

    @pytest.mark.parametrize("policy", [{"X": 2.0}, {"C": -1.5}, {"X": 1.0, "C": 2.0}])
    def test_case_ii_hard(self, policy):
        assert abs(estimate_target_effect(builtin_scm("prop1_case_ii"), hard(policy), 100_000, 0)) < 0.05

    @pytest.mark.parametrize("name", ["prop1_case_i", "prop1_case_ii"])
    def test_functional(self, name):
        assert estimate_target_effect(builtin_scm(name), minus_reciprocal(), 100_000, 0) == pytest.approx(-1.0, abs=0.05)

    def test_chain_hard(self):
        assert estimate_target_effect(builtin_scm("chain"), hard({"Z": 1.0, "W": 1.0}), 100_000, 0) == pytest.approx(-1.0, abs=0.05)

    @pytest.mark.parametrize("z, w", [(-1.0, 1.0), (0.4, -0.6), (1.0, 0.0)])
    def test_chain_hard_clt(self, z, w):
        draws = sample(builtin_scm("chain"), hard({"Z": z, "W": w}), 50_000, 2)
        y = draws["Y"]
        assert abs(y.mean() + w) <= 4 * y.std() / math.sqrt(len(y))

    def test_chain_functional_closed_form(self):
        # E[Y] = -w - 3 * slope * E[X^2] = -w - 3 * slope
        est = estimate_target_effect(builtin_scm("chain"), chain_z_linear(0.5, 1.0), 200_000, 4)
        assert est == pytest.approx(-2.5, abs=0.05)


class TestConditional:
    def test_parse_predicate(self):
        assert parse_predicate("X<0") == {"X": (-math.inf, 0.0)}
        assert parse_predicate("55<Age<60 & BMI>25") == {"Age": (55.0, 60.0), "BMI": (25.0, math.inf)}
        with pytest.raises(PredicateError):
            parse_predicate("X=")

    def test_half_normal(self):
        est, acc = estimate_conditional_target_effect(
            builtin_scm("chain"), hard({"Z": -1.0, "W": 1.0}), {"X": (-math.inf, 0.0)}, 1_000_000, 0
        )
        assert est == pytest.approx(-1.0 - 3.0 * math.sqrt(2 / math.pi), abs=0.05)
        assert acc == pytest.approx(0.5, abs=0.01)

    def test_observational_symmetry(self):
        # E[Y | X] = 1.5 X^2 without intervention, identical on both halves
        scm = builtin_scm("chain")
        lo, _ = estimate_conditional_target_effect(scm, None, {"X": (-math.inf, 0.0)}, 400_000, 1)
        hi, _ = estimate_conditional_target_effect(scm, None, {"X": (0.0, math.inf)}, 400_000, 1)
        assert lo == pytest.approx(1.5, abs=0.05) and hi == pytest.approx(1.5, abs=0.05)

    def test_sure_event(self):
        scm = builtin_scm("chain")
        full, acc = estimate_conditional_target_effect(scm, None, {"X": (-math.inf, math.inf)}, 10_000, 3)
        assert acc == 1.0 and full == pytest.approx(estimate_target_effect(scm, None, 10_000, 3))

    def test_descendant_rejected(self):
        with pytest.raises(PredicateError):
            estimate_conditional_target_effect(builtin_scm("chain"), None, {"Z": (0.0, math.inf)}, 100, 0)

    def test_low_mass(self):
        with pytest.raises(InsufficientMassError):
            estimate_conditional_target_effect(builtin_scm("chain"), None, {"X": (4.5, math.inf)}, 10_000, 0)

    def test_pgain_of_observed_behaviour_is_near_zero(self):
        # W = U_W has mean 0, so do(W=0) leaves E[Y | X<0] unchanged
        scm = builtin_scm("chain")
        pg = performance_gain(scm, hard({"W": 0.0}), {"X": (-math.inf, 0.0)}, 400_000, 2)
        assert abs(pg) < 0.02

    def test_pgain_cbo_optimum(self):
        scm = builtin_scm("chain")
        policy = hard({"Z": -1.0, "W": 1.0})
        lo = performance_gain(scm, policy, {"X": (-math.inf, 0.0)}, 1_000_000, 0)
        hi = performance_gain(scm, policy, {"X": (0.0, math.inf)}, 1_000_000, 0)
        # closed forms: 1.5 - (-1 - 3 E[X | X<0]) and 1.5 - (-1 + 3 E[X | X>0])
        half = math.sqrt(2 / math.pi)
        assert lo == pytest.approx(2.5 + 3 * half, abs=0.05)
        assert hi == pytest.approx(2.5 - 3 * half, abs=0.05)

    def test_pgain_functional_both_positive(self):
        scm = builtin_scm("chain")
        policy = chain_z_linear(1.0, 1.0)
        assert performance_gain(scm, policy, {"X": (-math.inf, 0.0)}, 200_000, 0) > 0
        assert performance_gain(scm, policy, {"X": (0.0, math.inf)}, 200_000, 0) > 0

    def test_unknown_scm(self):
        with pytest.raises(KeyError):
            builtin_scm("nope")

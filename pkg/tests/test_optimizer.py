import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qaoalab.interp import MonotoneCubic, PiecewiseLinear
from qaoalab.optimizer import (
    OptimizeConfig,
    OptimResult,
    adjoint_gradient,
    canonicalize,
    extend_schedule,
    objective_gradient,
    optimize_chain,
    optimize_p,
    optimize_p1,
)
from qaoalab.problems import energy_table, sample_qubo
from qaoalab.simulator import AngleSchedule, energy_expectation, plus_state, qaoa_expectation, run_qaoa


@pytest.fixture(scope="module")
def t6():
    return energy_table(sample_qubo(6, 8))


@pytest.fixture(scope="module")
def chain6(t6):
    return list(optimize_chain(t6, 6))


def dense_p1_landscape(t, gammas, thetas):
    """<H>(gamma, theta) for a single layer, vectorized over a grid (n small)."""
    n = t.n
    dim = 2**n
    hx = np.zeros((dim, dim))
    for z in range(dim):
        for q in range(n):
            hx[z ^ (1 << q), z] = 1.0
    w, v = np.linalg.eigh(hx)
    phased = np.exp(-1j * np.outer(gammas, t.raw)) / math.sqrt(dim)
    out = np.empty((gammas.size, thetas.size))
    coeffs = phased @ v
    for j, th in enumerate(thetas):
        psi = (coeffs * np.exp(-0.5j * th * w)) @ v.T
        out[:, j] = (np.abs(psi) ** 2) @ t.raw
    return out


class TestP1:
    def test_matches_fine_grid(self):
        t = energy_table(sample_qubo(2, 3))
        cap = OptimizeConfig().gamma_cap_factor / t.width
        gammas = np.linspace(-cap, cap, 1000)
        thetas = np.linspace(-math.pi, math.pi, 1000)
        grid_min = dense_p1_landscape(t, gammas, thetas).min()
        res = optimize_p1(t, OptimizeConfig(restarts=3))
        assert res.value <= grid_min + 1e-12
        # the grid resolves the minimum to second order in its spacing
        assert grid_min - res.value < 1e-4 * t.width

    @pytest.mark.parametrize("seed", range(6))
    def test_beats_plus_state(self, seed):
        t = energy_table(sample_qubo(7, seed))
        assert optimize_p1(t).value < energy_expectation(plus_state(7), t)

    def test_gauge(self, t6):
        s = optimize_p1(t6).schedule
        assert s.gamma.sum() > 0
        assert -math.pi < s.theta[0] <= math.pi


class TestExtend:
    def test_resources_preserved_from_p1(self):
        s = AngleSchedule([0.4], [-1.1])
        e = extend_schedule(s)
        assert e.p == 2
        assert e.gamma.sum() == pytest.approx(0.4, abs=1e-15)
        assert e.theta.sum() == pytest.approx(-1.1, abs=1e-15)

    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_monotone_sums_stay_monotone(self, gammas):
        s = AngleSchedule(gammas, [-0.3] * len(gammas))
        e = extend_schedule(s)
        assert np.all(e.gamma >= -1e-15)
        assert e.gamma.sum() == pytest.approx(sum(gammas), rel=1e-12)

    @pytest.mark.parametrize("p", [2, 3, 7, 15])
    def test_linear_ramp(self, p):
        k = np.arange(1, p + 1)
        s = AngleSchedule(0.1 * (k - 0.5) / p, -0.9 * (p - k + 0.5) / p)
        e = extend_schedule(s)
        kk = np.arange(1, p + 2)
        np.testing.assert_allclose(e.gamma, 0.1 * p / (p + 1) * (kk - 0.5) / (p + 1), atol=1e-13)
        np.testing.assert_allclose(e.theta, -0.9 * p / (p + 1) * (p + 1 - kk + 0.5) / (p + 1), atol=1e-13)

    def test_constant_schedule(self):
        e = extend_schedule(AngleSchedule([0.2] * 5, [0.5] * 5))
        np.testing.assert_allclose(e.gamma, 1.0 / 6, atol=1e-14)


class TestChain:
    def test_values_non_increasing(self, t6, chain6):
        tol = OptimizeConfig().tol_for(t6)
        values = [r.value for r in chain6]
        assert all(b <= a + tol for a, b in zip(values, values[1:]))

    def test_matches_recorded_state(self, t6, chain6):
        for r in chain6:
            assert qaoa_expectation(t6, r.schedule) == pytest.approx(r.value, abs=1e-9)
            assert 0.0 <= r.ground_overlap <= 1.0

    def test_gradient_vanishes(self, t6, chain6):
        tol = OptimizeConfig().tol_for(t6)
        for r in chain6:
            _, g = adjoint_gradient(t6, r.schedule)
            assert np.max(np.abs(g)) < 10 * tol

    def test_deterministic(self, t6, chain6):
        again = list(optimize_chain(t6, 6))
        assert [r.schedule for r in again] == [r.schedule for r in chain6]
        assert [r.value for r in again] == [r.value for r in chain6]

    def test_optimize_p_uses_previous(self, t6, chain6):
        res = optimize_p(t6, 4, previous=chain6[2])
        assert res.schedule == chain6[3].schedule

    def test_previous_must_match(self, t6, chain6):
        with pytest.raises(ValueError):
            optimize_p(t6, 4, previous=chain6[0])

    def test_nelder_mead_and_fd(self, t6, chain6):
        for cfg in (OptimizeConfig(local="nelder-mead"), OptimizeConfig(gradient="fd")):
            res = list(optimize_chain(t6, 3, cfg))[-1]
            assert res.value <= chain6[1].value + 1e-6 * t6.width

    def test_json(self, t6, chain6, tmp_path):
        chain6[-1].save(tmp_path / "r.json", instance_id="x", seed=3)
        assert OptimResult.load_schedule(tmp_path / "r.json") == chain6[-1].schedule


class TestGradients:
    def test_zero_schedule_mixer_derivative(self, t6):
        s = AngleSchedule(np.zeros(3), np.zeros(3))
        _, g = adjoint_gradient(t6, s)
        h = 1e-3
        x = s.as_vector()
        for i in range(3, 6):
            e = np.zeros(6)
            e[i] = h
            f = [qaoa_expectation(t6, AngleSchedule.from_vector(x + c * e)) for c in (-2, -1, 1, 2)]
            fd4 = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
            assert abs(fd4) < 1e-10 and abs(g[i]) < 1e-12

    @given(st.integers(0, 2**31))
    @settings(max_examples=15, deadline=None)
    def test_adjoint_matches_differences(self, seed):
        t = energy_table(sample_qubo(5, seed))
        rng = np.random.default_rng(seed)
        s = AngleSchedule(rng.uniform(-0.5, 0.5, 4), rng.uniform(-2, 2, 4))
        v, g = adjoint_gradient(t, s)
        assert v == pytest.approx(qaoa_expectation(t, s), abs=1e-12)
        np.testing.assert_allclose(g, objective_gradient(t, s, 1e-5), atol=1e-6)

    def test_step_halving(self, t6):
        s = AngleSchedule([0.2, 0.35], [-1.2, -0.6])
        _, exact = adjoint_gradient(t6, s)
        e1 = np.abs(objective_gradient(t6, s, 1e-2) - exact)
        e2 = np.abs(objective_gradient(t6, s, 5e-3) - exact)
        mask = e1 > 1e-9
        np.testing.assert_allclose(e2[mask] / e1[mask], 0.25, atol=0.02)

    def test_step_must_be_positive(self, t6):
        with pytest.raises(ValueError):
            objective_gradient(t6, AngleSchedule([0.1], [0.1]), 0.0)


class TestCanonical:
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=10))
    @settings(max_examples=40, deadline=None)
    def test_probabilities_invariant(self, angles):
        t = energy_table(sample_qubo(4, 2))
        p = len(angles) // 2
        s = AngleSchedule(angles[:p], angles[p:2 * p])
        c = canonicalize(s)
        np.testing.assert_allclose(run_qaoa(t, c).probabilities, run_qaoa(t, s).probabilities, atol=1e-11)
        assert c.gamma.sum() >= 0
        assert np.all(np.abs(c.theta) <= math.pi)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(restarts=0), dict(grad_step=0.0), dict(tol=-1.0),
                                        dict(strategy="x"), dict(local="x"), dict(gradient="x")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            OptimizeConfig(**kwargs)


class TestMonotoneCubic:
    def test_passes_through_knots(self):
        rng = np.random.default_rng(0)
        x = np.cumsum(rng.uniform(0.1, 1.0, 12))
        y = np.cumsum(rng.uniform(0.0, 1.0, 12))
        np.testing.assert_allclose(MonotoneCubic(x, y)(x), y, atol=1e-12)

    @given(st.lists(st.floats(0.0, 5.0), min_size=3, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_monotone(self, steps):
        y = np.concatenate([[0.0], np.cumsum(steps)])
        x = np.arange(y.size, dtype=float)
        f = MonotoneCubic(x, y)
        u = np.linspace(0, x[-1], 2000)
        assert np.all(np.diff(f(u)) >= -1e-12)
        assert np.all(f.derivative(u) >= -1e-12)

    def test_quadratic_exact(self):
        x = np.linspace(0, 1, 7)
        f = MonotoneCubic(x, x**2 + x)
        u = np.linspace(0, 1, 101)
        np.testing.assert_allclose(f(u), u**2 + u, atol=1e-13)
        np.testing.assert_allclose(f.derivative(u), 2 * u + 1, atol=1e-12)

    def test_outside_range(self):
        with pytest.raises(ValueError):
            MonotoneCubic([0.0, 1.0, 2.0], [0.0, 1.0, 2.0])(2.5)

    def test_piecewise_linear(self):
        f = PiecewiseLinear([0.0, 1.0, 3.0], [0.0, 2.0, 3.0])
        np.testing.assert_allclose(f.derivative([0.5, 2.0]), [2.0, 0.5])
        assert f(2.0) == pytest.approx(2.5)

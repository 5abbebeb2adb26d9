import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from nmpfunnel import DisturbanceModel, LtiSystem
from nmpfunnel.errors import NoStrictRelativeDegree
from nmpfunnel.lti import (byrnes_isidori, disturbance_matching, normal_form_residual, relative_degree,
                           simulate_open_loop)
from nmpfunnel.numlin import expm

from conftest import A_BENCH, B_BENCH, C_BENCH
from oracles import random_bif_system


def test_benchmark_relative_degree(bench_sys):
    rd = relative_degree(bench_sys)
    assert rd.r == 2
    assert np.allclose(bench_sys.c @ bench_sys.b, 0.0)
    assert rd.gamma[0, 0] == pytest.approx(2.0, rel=1e-12)


def test_relative_degree_identity_plant():
    rd = relative_degree(LtiSystem(np.zeros((2, 2)), np.eye(2), np.eye(2)))
    assert rd.r == 1 and np.allclose(rd.gamma, np.eye(2))


def test_relative_degree_two_state_example():
    rd = relative_degree(LtiSystem([[0, 1], [1, 1]], [[1], [0]], [[1, 0]]))
    assert rd.r == 1 and rd.gamma[0, 0] == pytest.approx(1.0)


def test_relative_degree_monotone_in_zero_tolerance():
    sys = LtiSystem([[0.0, 1.0], [0.0, 0.0]], [[1e-6], [1.0]], [[1.0, 0.0]])
    found = [relative_degree(sys, tol_zero=tol).r for tol in (1e-12, 1e-9, 1e-3, 1e-2)]
    assert found == sorted(found)
    assert found[0] == 1 and found[-1] == 2


def test_relative_degree_missing():
    sys = LtiSystem([[0.0, 1.0], [0.0, 0.0]], [[1.0], [0.0]], [[0.0, 1.0]])
    with pytest.raises(NoStrictRelativeDegree):
        relative_degree(sys)


def test_disturbance_matching_cases(bench_sys):
    assert disturbance_matching(bench_sys, 2).passed
    zero = LtiSystem(A_BENCH, B_BENCH, C_BENCH)
    assert disturbance_matching(zero, 2).passed
    along_b = DisturbanceModel(4, lambda t: B_BENCH[:, 0] * math.sin(t))
    through_b = LtiSystem(A_BENCH, B_BENCH, C_BENCH, disturbance=along_b)
    assert disturbance_matching(through_b, 2).passed
    e1 = LtiSystem(A_BENCH, B_BENCH, C_BENCH, disturbance=DisturbanceModel(4, lambda t: np.array([1.0, 0, 0, 0])))
    assert not disturbance_matching(e1, 2).passed


def test_benchmark_normal_form(bench_sys):
    nf = byrnes_isidori(bench_sys, 2)
    assert nf.r_coeffs[0][0, 0] == pytest.approx(-18.0, abs=1e-12)
    assert nf.r_coeffs[1][0, 0] == pytest.approx(-7.0, abs=1e-12)
    assert np.allclose(nf.s, [[1.0, -24.0]], atol=1e-12)
    assert np.allclose(nf.p, [[0.0], [1.0]], atol=1e-12)
    assert np.allclose(nf.q, [[-1.0, 3.0], [0.0, 1.0]], atol=1e-12)
    assert nf.gamma[0, 0] == pytest.approx(2.0)
    assert max(normal_form_residual(bench_sys, nf)) < 1e-12


def test_two_state_internal_dynamics_unstable():
    nf = byrnes_isidori(LtiSystem([[0, 1], [1, 1]], [[1], [0]], [[1, 0]]), 1)
    assert nf.q[0, 0] == pytest.approx(1.0)
    assert abs(nf.p[0, 0]) == pytest.approx(1.0)


def test_zero_dynamics_are_invariant_zeros(rng):
    """Eigenvalues of the internal dynamics are exactly where the Rosenbrock matrix loses rank."""
    for _ in range(5):
        a, b, c, _ = random_bif_system(rng, 5, 1, 2)
        sys = LtiSystem(a, b, c)
        nf = byrnes_isidori(sys, relative_degree(sys).r)
        for lam in np.linalg.eigvals(nf.q):
            rosen = np.block([[a - lam * np.eye(5), b], [c, np.zeros((1, 1))]])
            sv = np.linalg.svd(rosen, compute_uv=False)
            assert sv[-1] < 1e-8 * sv[0]


def test_bif_round_trip_random_systems(rng):
    """Original plant (own integrator) against the normal form (scipy DOP853): same output."""
    shapes = [(n, m, r) for n in range(2, 9) for m in (1, 2) for r in (1, 2, 3) if r * m <= n]
    picks = rng.choice(len(shapes), size=20, replace=True)
    grid = np.linspace(0.0, 2.0, 101)
    worst = 0.0
    for idx in picks:
        n, m, r = shapes[idx]
        a, b, c, _ = random_bif_system(rng, n, m, r)
        x0 = rng.normal(size=n)
        sys = LtiSystem(a, b, c, x0=x0)
        rd = relative_degree(sys)
        assert rd.r == r
        nf = byrnes_isidori(sys, r)
        freqs = rng.uniform(0.5, 3.0, size=m)

        def u(t):
            return np.sin(freqs * t)

        res = simulate_open_loop(sys, u, 2.0, t_eval=grid)
        y_orig = res.y @ c.T
        a_bif, b_bif = nf.matrices()
        ref = solve_ivp(lambda t, z: a_bif @ z + b_bif @ u(t), (0.0, 2.0), nf.u_transform @ x0,
                        t_eval=grid, method="DOP853", rtol=1e-12, atol=1e-12)
        y_bif = ref.y.T[:, :m]
        worst = max(worst, float(np.max(np.abs(y_orig - y_bif)) / max(1.0, np.max(np.abs(y_bif)))))
    assert worst <= 1e-6


def test_open_loop_zero():
    sys = LtiSystem(-np.eye(3), np.ones((3, 1)), [[1.0, 0, 0]])
    res = simulate_open_loop(sys, lambda t: np.zeros(1), 3.0, t_eval=np.linspace(0, 3, 7))
    assert np.all(res.y == 0.0)


def test_open_loop_matches_matrix_exponential():
    sys = LtiSystem(A_BENCH, B_BENCH, C_BENCH, x0=np.array([1.0, 0, 0, 0]))
    grid = np.linspace(0.0, 5.0, 11)
    res = simulate_open_loop(sys, lambda t: np.zeros(1), 5.0, t_eval=grid)
    exact = np.array([expm(A_BENCH, t) @ sys.x0 for t in grid])
    assert np.max(np.abs(res.y - exact)) < 1e-8


def test_open_loop_scalar_step_response():
    sys = LtiSystem([[-1.0]], [[1.0]], [[1.0]])
    grid = np.linspace(0.0, 4.0, 9)
    res = simulate_open_loop(sys, lambda t: np.ones(1), 4.0, t_eval=grid)
    assert np.allclose(res.y[:, 0], 1 - np.exp(-grid), atol=1e-9)

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from nmpfunnel import DisturbanceModel, LtiSystem, ReferenceSignal
from nmpfunnel.errors import NoDecomposition
from nmpfunnel.lti import byrnes_isidori, relative_degree, simulate_open_loop
from nmpfunnel.redef import (build_redefinition, check_a2, check_a3, find_a1_decomposition, search_decomposition,
                             spectral_split, verify_new_relative_degree)

from conftest import A_BENCH, B_BENCH, C_BENCH
from oracles import random_bif_system


@pytest.fixture(scope="module")
def bench_chain(bench_sys):
    nf = byrnes_isidori(bench_sys, 2)
    dec = find_a1_decomposition(nf, disturbance=bench_sys.disturbance)
    return nf, dec, build_redefinition(nf, dec)


def nonminimum_phase(rng, n=5, m=1, r=2, q_eigs=(-1.0, -2.0, 1.5)):
    a, b, c, _ = random_bif_system(rng, n, m, r, q_eigs=q_eigs)
    sys = LtiSystem(a, b, c, x0=rng.normal(size=n))
    nf = byrnes_isidori(sys, relative_degree(sys).r)
    dec = find_a1_decomposition(nf)
    return sys, nf, dec, build_redefinition(nf, dec)


def test_benchmark_decomposition(bench_chain):
    _, dec, _ = bench_chain
    assert dec.ell == 1
    assert abs(dec.q_tilde[0, 0] - 1.0) < 1e-12
    assert abs(abs(dec.p_tilde[0, 0]) - 1.0) < 1e-12
    assert abs(dec.q_hat1[0, 0] + 1.0) < 1e-12


def test_benchmark_redefinition(bench_chain):
    _, dec, red = bench_chain
    # K Pt = 1/Gamma fixes K up to the sign convention of Pt
    assert red.k_row[0, 0] * dec.p_tilde[0, 0] == pytest.approx(0.5, rel=1e-12)
    assert np.allclose(red.measurement_map[0], [0.0, 0.0, 0.5, 0.0], atol=1e-12)
    assert red.order == 3
    assert red.alphas == pytest.approx((2.0, 2.0), rel=1e-12)


def test_rotation_block_has_no_decomposition():
    q = [[-1.0, 1.0, 0.0], [-1.0, -1.0, 0.0], [0.0, 0.0, 1.0]]
    p = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    with pytest.raises(NoDecomposition) as info:
        search_decomposition(q, p, 2)
    assert info.value.assumption == "A1"


def test_triangular_input_accepts_identity():
    dec = search_decomposition([[-2.0, 1.0], [0.0, 3.0]], [[0.0], [1.0]], 1)
    assert dec.ell == 1
    assert np.allclose(np.abs(dec.t_transform), np.eye(2))
    assert dec.q_tilde[0, 0] == pytest.approx(3.0)
    assert dec.zero_block_residual < 1e-12


def test_minimum_phase_bypass():
    dec = search_decomposition([[-2.0]], [[1.0]], 1)
    assert dec.ell == 0 and dec.k_dim == 1


def test_spectral_split_scalar(bench_chain):
    split = spectral_split(bench_chain[1])
    assert (split.k1, split.k2, split.k3) == (0, 1, 0)
    assert split.q2[0, 0] == pytest.approx(1.0)
    assert abs(split.w_transform[0, 0]) == pytest.approx(1.0)


def test_spectral_split_diagonal():
    split = spectral_split(search_decomposition(np.diag([-2.0, 3.0]), np.eye(2), 2))
    assert split.q1[0, 0] == pytest.approx(-2.0) and split.q2[0, 0] == pytest.approx(3.0)
    assert np.allclose(np.abs(split.w_transform), np.eye(2))


def test_spectral_split_mixed_spectrum(rng):
    v = rng.normal(size=(4, 4)) + 3 * np.eye(4)
    j = np.array([[-1.0, 0, 0, 0], [0, 2, 0, 0], [0, 0, 0, 1], [0, 0, -1, 0]])
    dec = search_decomposition(v @ j @ np.linalg.inv(v), rng.normal(size=(4, 2)), 2)
    split = spectral_split(dec)
    assert (split.k1, split.k2, split.k3) == (1, 1, 2)
    rebuilt = split.w_inverse @ split.block_diagonal() @ split.w_transform
    assert np.linalg.norm(rebuilt - dec.q_tilde) < 1e-9


def test_a2_cases(bench_chain):
    assert check_a2(spectral_split(bench_chain[1]), ReferenceSignal.zero(1)).passed
    split = spectral_split(search_decomposition([[0.0, 1.0], [-1.0, 0.0]], np.eye(2), 2))
    assert split.k3 == 2
    resonant = check_a2(split, ReferenceSignal.from_expressions(["sin(t)", "0"]))
    assert not resonant.passed and resonant.residuals["growth_ratio"] > 1.5
    assert check_a2(split, ReferenceSignal.from_expressions(["1", "0"])).passed


def test_a3_cases(bench_sys, bench_chain):
    nf, dec, _ = bench_chain
    assert check_a3(nf, dec, bench_sys.disturbance).passed
    assert check_a3(nf, dec, DisturbanceModel.zero(4)).passed
    # constant push on x3, which is the unstable internal coordinate
    push = DisturbanceModel(4, lambda t: np.array([0.0, 0.0, 1.0, 0.0]))
    cert = check_a3(nf, dec, push)
    assert not cert.passed
    assert cert.details["image_condition"] is True
    assert cert.residuals["delta_max"] > 0.1


def test_k_identities_and_reconstruction(rng):
    for q_eigs in ((-1.0, 1.5), (-1.0, 0.5, 2.0)):
        _, nf, dec, red = nonminimum_phase(rng, n=2 + len(q_eigs), q_eigs=q_eigs)
        assert max(red.k_identities()) < 1e-9
        ell, m = red.ell, red.m
        total = sum(red.f_coeffs[i] @ red.stack[i * m:(i + 1) * m] for i in range(ell))
        assert np.allclose(total, np.eye(ell * m), atol=1e-9)
        assert verify_new_relative_degree(red, nf).passed


def test_new_relative_degree(bench_sys, bench_chain):
    nf, _, red = bench_chain
    cert = verify_new_relative_degree(red, nf, bench_sys)
    assert cert.passed and cert.residuals["found"] == 3


def test_new_output_cross_simulation(rng):
    """Redefined normal form and the original plant driven by the same input give the same new output."""
    for _ in range(3):
        sys, nf, dec, red = nonminimum_phase(rng)
        assert dec.ell == 1
        grid = np.linspace(0.0, 2.0, 81)

        def u(t):
            return np.array([math.cos(2 * t)])

        orig = simulate_open_loop(sys, u, 2.0, t_eval=grid)
        y_new_orig = orig.y @ red.measurement_map[:red.m].T
        xi0 = red.coordinates @ nf.u_transform @ sys.x0
        ref = solve_ivp(lambda t, z: red.a_new @ z + red.b_new @ u(t), (0.0, 2.0), xi0, t_eval=grid,
                        method="DOP853", rtol=1e-12, atol=1e-12)
        assert np.max(np.abs(ref.y.T[:, :red.m] - y_new_orig)) < 1e-6

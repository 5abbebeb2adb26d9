import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmpfunnel.errors import SpectraNotSeparated
from nmpfunnel.numlin import classify_spectrum, expm, ordered_schur, solve_sylvester

from oracles import kron_sylvester, unshifted_qr_eigenvalues


def test_schur_diagonal_select_stable():
    sd = ordered_schur(np.diag([-1.0, 2.0]), lambda z: z.real < 0)
    assert sd.n_selected == 1
    assert sd.quasi_triangular[0, 0] == pytest.approx(-1.0)
    assert np.allclose(sd.reconstruct(), np.diag([-1.0, 2.0]))


def test_schur_rotation_block_trails():
    q = np.array([[-1.0, 1, 0], [-1, -1, 0], [0, 0, 1]])
    sd = ordered_schur(q, lambda z: z.real > 0)
    assert sd.quasi_triangular[0, 0] == pytest.approx(1.0)
    trailing = np.sort_complex(np.linalg.eigvals(sd.quasi_triangular[1:, 1:]))
    assert np.allclose(trailing, [-1 - 1j, -1 + 1j])
    assert np.linalg.norm(sd.reconstruct() - q) < 1e-12


def test_schur_random_known_spectrum_against_qr_oracle(rng):
    spectrum = np.array([-3.0, -1.5, -0.5, 0.7, 2.0, 4.0])
    v = rng.normal(size=(6, 6)) + 4 * np.eye(6)
    m = v @ np.diag(spectrum) @ np.linalg.inv(v)
    sd = ordered_schur(m, lambda z: z.real > 0)
    assert sd.n_selected == 3
    assert np.linalg.norm(sd.reconstruct() - m) < 1e-10 * np.linalg.norm(m)
    lead = np.sort(np.diag(sd.quasi_triangular)[:3])
    assert np.allclose(lead, [0.7, 2.0, 4.0], atol=1e-8)
    oracle = unshifted_qr_eigenvalues(m)
    assert np.allclose(np.sort(np.diag(sd.quasi_triangular)), oracle, atol=1e-8)
    assert np.allclose(oracle, spectrum, atol=1e-8)


def test_schur_orthogonal_factor(rng):
    m = rng.normal(size=(7, 7))
    sd = ordered_schur(m, lambda z: z.real < 0)
    z = sd.orthogonal
    assert np.allclose(z.T @ z, np.eye(7), atol=1e-12)
    sel = sd.eigenvalues[:sd.n_selected]
    assert np.all(sel.real < 0)
    assert np.all(sd.eigenvalues[sd.n_selected:].real >= 0)


@pytest.mark.parametrize("a,b,c,x", [([[2.0]], [[0.0]], [[1.0]], 0.5), ([[1.0]], [[-1.0]], [[4.0]], 2.0)])
def test_sylvester_scalar(a, b, c, x):
    assert solve_sylvester(a, b, c)[0, 0] == pytest.approx(x)


def test_sylvester_against_kronecker_oracle(rng):
    for _ in range(20):
        a = rng.normal(size=(4, 4)) - 4 * np.eye(4)
        b = rng.normal(size=(3, 3)) + 4 * np.eye(3)
        c = rng.normal(size=(4, 3))
        x = solve_sylvester(a, b, c)
        assert np.linalg.norm(a @ x - x @ b - c) < 1e-9
        assert np.allclose(x, kron_sylvester(a, b, c), atol=1e-9)


def test_sylvester_rejects_shared_eigenvalue():
    with pytest.raises(SpectraNotSeparated):
        solve_sylvester(np.eye(2), np.eye(2), np.ones((2, 2)))


def test_expm_closed_forms():
    assert np.array_equal(expm(np.zeros((3, 3))), np.eye(3))
    assert np.allclose(expm([[0.0, 1.0], [0.0, 0.0]]), [[1, 1], [0, 1]], atol=1e-15)
    assert expm([[-1.0]], 2 * math.pi)[0, 0] == pytest.approx(math.exp(-2 * math.pi), rel=1e-13)
    assert expm([[-1.0]], 2 * math.pi)[0, 0] == pytest.approx(1.8674e-3, rel=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.integers(0, 2 ** 31 - 1))
def test_expm_semigroup(s, t, seed):
    m = np.random.default_rng(seed).normal(size=(4, 4))
    assert np.allclose(expm(m, s) @ expm(m, t), expm(m, s + t), rtol=1e-9, atol=1e-9)


def test_classify_spectrum_examples():
    cls = classify_spectrum([-1.0, 1.0])
    assert cls.stable == (0,) and cls.antistable == (1,) and cls.critical == ()
    assert classify_spectrum([0.0]).critical == (0,)
    cls = classify_spectrum([-1 + 1j, -1 - 1j, 1.0])
    assert cls.stable == (0, 1) and cls.antistable == (2,)
    assert cls.sizes == (2, 1, 0)

"""Independent reference computations used by the test-suite.

Nothing here imports the package's numerical routines; each oracle takes a
different route to the quantity it checks.
"""

from functools import lru_cache
from math import comb

import numpy as np


def kron_sylvester(a, b, c):
    """Solve ``a X - X b = c`` through the vectorised Kronecker system."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    c = np.atleast_2d(c)
    p, q = c.shape
    big = np.kron(np.eye(q), a) - np.kron(b.T, np.eye(p))
    vec = np.linalg.solve(big, c.reshape(-1, order="F"))
    return vec.reshape((p, q), order="F")


def unshifted_qr_eigenvalues(m, iterations=5000):
    """Eigenvalues of a matrix with real spectrum of distinct moduli (plain QR iteration)."""
    a = np.array(m, dtype=float)
    for _ in range(iterations):
        q, r = np.linalg.qr(a)
        a = r @ q
    return np.sort(np.diag(a))


def gauss_legendre(f, a, b, panels=1000, nodes=10):
    """Composite Gauss-Legendre rule with ``panels * nodes`` evaluations."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(a, b, panels + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        total += half * np.sum(w * f(mid + half * x))
    return total


def random_bif_system(rng, n, m, r, q_eigs=None):
    """Random plant of strict relative degree ``r`` hidden behind a similarity transform.

    ``q_eigs`` optionally fixes the (real) spectrum of the internal dynamics.
    Returns ``(a, b, c, gamma)``.
    """
    rm = r * m
    k = n - rm
    a_bif = np.zeros((n, n))
    for i in range(r - 1):
        a_bif[i * m:(i + 1) * m, (i + 1) * m:(i + 2) * m] = np.eye(m)
    a_bif[(r - 1) * m:rm, :] = rng.normal(size=(m, n))
    if k:
        a_bif[rm:, :m] = rng.normal(size=(k, m))
        if q_eigs is None:
            a_bif[rm:, rm:] = rng.normal(size=(k, k)) - 1.5 * np.eye(k)
        else:
            v = rng.normal(size=(k, k)) + 3.0 * np.eye(k)
            a_bif[rm:, rm:] = v @ np.diag(q_eigs) @ np.linalg.inv(v)
    gamma = rng.normal(size=(m, m)) + 2.0 * np.eye(m)
    b_bif = np.zeros((n, m))
    b_bif[(r - 1) * m:rm] = gamma
    c_bif = np.zeros((m, n))
    c_bif[:, :m] = np.eye(m)
    u = rng.normal(size=(n, n)) + 3.0 * np.eye(n)
    u_inv = np.linalg.inv(u)
    return u_inv @ a_bif @ u, u_inv @ b_bif, c_bif @ u, gamma


def rk4(f, y0, grid, substeps=20):
    """Classical fixed-step Runge-Kutta on ``grid`` with ``substeps`` per interval."""
    ys = [np.array(y0, dtype=float)]
    y = ys[0].copy()
    for t0, t1 in zip(grid[:-1], grid[1:]):
        h = (t1 - t0) / substeps
        t = t0
        for _ in range(substeps):
            k1 = f(t, y)
            k2 = f(t + h / 2, y + h / 2 * k1)
            k3 = f(t + h / 2, y + h / 2 * k2)
            k4 = f(t + h, y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        ys.append(y.copy())
    return np.array(ys)


def brute_force_hat_k(psi, dphi, eps, levels):
    """Scalar evaluation of the bound recursion at a single time instant.

    ``psi[i]`` is ``psi_i(t)``, ``dphi[i][q]`` is ``|phi_i^(q)(t)|`` and
    ``eps[i]`` is ``eps_i(t)``.  Returns ``[Khat_0, ..., Khat_{levels-2}]``.
    Written as plain recursive functions with explicit loops and empty sums
    equal to zero.
    """

    @lru_cache(maxsize=None)
    def n_(i, j):
        if j == 0:
            return psi[i]
        return n_(i + 1, j - 1) + m_(i, j - 1)

    @lru_cache(maxsize=None)
    def l_(i, j):
        if j == 0:
            return psi[i] ** 2
        s = 0.0
        for q in range(0, j):
            s += comb(j - 1, q) * n_(i, q) * n_(i, j - q)
        return 2.0 * s

    @lru_cache(maxsize=None)
    def ph_(i, j):
        if j == 0:
            return dphi[i][0] ** 2
        s = 0.0
        for q in range(0, j):
            s += comb(j - 1, q) * dphi[i][q] * dphi[i][j - q]
        return 2.0 * s

    @lru_cache(maxsize=None)
    def sig_(i, j):
        s = 0.5 * (ph_(i, 0) * l_(i, j + 1) + ph_(i, 1) * l_(i, j) + ph_(i, j) * l_(i, 1) + l_(i, 0) * ph_(i, j + 1))
        l1 = 1
        while l1 <= j - 1:
            a = 0.0
            for l2 in range(0, j - l1 + 1):
                a += comb(j - l1, l2) * n_(i, l2) * n_(i, j - l1 - l2)
            b = 0.0
            for l2 in range(0, l1 + 1):
                b += comb(l1, l2) * dphi[i][l2] * dphi[i][l1 - l2]
            s += comb(j, l1) * (ph_(i, l1) * a + l_(i, j - l1) * b)
            l1 += 1
        return s

    @lru_cache(maxsize=None)
    def k_(i, j):
        if j == 0:
            return psi[i] / eps[i]
        s = k_(i, 0) ** 2 * sig_(i, j - 1)
        for l1 in range(1, j):
            for l2 in range(0, l1):
                s += comb(j - 1, l1) * comb(l1 - 1, l2) * sig_(i, j - l1 - 1) * k_(i, l2 + 1) * k_(i, l1 - l2 - 1)
        return s

    @lru_cache(maxsize=None)
    def m_(i, j):
        s = 0.0
        for q in range(0, j + 1):
            s += comb(j, q) * k_(i, q) * n_(i, j - q)
        return s

    out = []
    for i in range(levels - 1):
        out.append(sum(m_(j, i - j) for j in range(i + 1)))
    return out


def k_hat1_closed_form(psi0, psi1, eps0, eps1, dphi0):
    return ((psi0 / eps0) * (psi1 + psi0 ** 2 / eps0) * (1 + 2 * psi0 / eps0)
            + psi1 ** 2 / eps1 + 2 * psi0 ** 4 * abs(dphi0) / eps0 ** 2)

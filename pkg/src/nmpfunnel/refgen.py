"""Reference signals and the generator of the redefined reference.

The redefined reference is produced online by

    eta_ref' = Qt eta_ref + Pt y_ref(t),    yhat_ref = K eta_ref.

Its anti-stable component must start on the unique bounded solution, which
is the improper integral

    z2(t0) = -int_{t0}^inf exp(-Q2 (s - t0)) P2 y_ref(s) ds.

It is evaluated by adaptive quadrature or, for exosystem references, from a
Sylvester equation.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.integrate
import scipy.interpolate
import sympy as sp

from .certificates import Certificate
from .errors import ConfigError, SlowDecay
from .expr import T, SignalExpression
from .numlin import default_axis_tol, expm, solve_sylvester
from .ode import integrate

__all__ = [
    "Exosystem",
    "ReferenceSignal",
    "ReferenceGenerator",
    "eta2_ref0_quadrature",
    "eta2_ref0_sylvester",
    "recompute_generator_state",
    "generate_reference",
    "boundedness_audit",
    "antistable_bound",
]


@dataclass(frozen=True)
class Exosystem:
    """``w' = A_e w``, ``y_ref = C_e w``, ``w(0) = w0``."""

    a_e: np.ndarray
    c_e: np.ndarray
    w0: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_e, dtype=float))
        k = a.shape[0]
        if a.shape != (k, k):
            raise ValueError("A_e must be square")
        c = np.asarray(self.c_e, dtype=float).reshape(-1, k)
        w0 = np.asarray(self.w0, dtype=float).reshape(k)
        object.__setattr__(self, "a_e", a)
        object.__setattr__(self, "c_e", c)
        object.__setattr__(self, "w0", w0)
        ok, msg = self.admissible()
        if not ok:
            raise ValueError(msg)

    def admissible(self, tol=None):
        """Spectrum in the closed left half-plane, critical eigenvalues semisimple."""
        a = self.a_e
        k = a.shape[0]
        if k == 0:
            return True, ""
        tol = default_axis_tol(a) if tol is None else tol
        eigs = np.linalg.eigvals(a)
        if np.any(eigs.real > tol):
            return False, "exosystem has eigenvalues in the open right half-plane"
        scale = max(1.0, np.linalg.norm(a, 2))
        for lam in eigs[np.abs(eigs.real) <= tol]:
            alg = int(np.sum(np.abs(eigs - lam) <= 1e-6 * scale))
            sv = np.linalg.svd(a - lam * np.eye(k), compute_uv=False)
            geo = int(np.sum(sv <= 1e-8 * scale))
            if geo < alg:
                return False, f"critical exosystem eigenvalue {lam:.6g} is not semisimple"
        return True, ""

    @property
    def m(self):
        return self.c_e.shape[0]

    def output(self, t, order=0):
        a = self.a_e
        return self.c_e @ np.linalg.matrix_power(a, order) @ (expm(a, t) @ self.w0)


@dataclass(frozen=True)
class ReferenceSignal:
    """Vector reference ``y_ref`` with derivatives.

    ``evaluator(t, order)`` returns the ``order``-th derivative (length ``m``).
    After ``support_end`` the signal equals the constant ``tail_value``.
    """

    evaluator: Callable[[float, int], np.ndarray]
    m: int
    max_order: int = 8
    kind: str = "analytic"
    support_end: Optional[float] = None
    tail_value: Optional[np.ndarray] = None
    exosystem: Optional[Exosystem] = None
    breakpoints: tuple = ()
    sup_bound: Optional[float] = None
    expressions: tuple = field(default=(), repr=False)

    def __call__(self, t, order=0):
        if order > self.max_order:
            raise ValueError(f"derivative order {order} exceeds the available {self.max_order}")
        return np.asarray(self.evaluator(float(t), order), dtype=float).reshape(self.m)

    def sample(self, grid, order=0):
        grid = np.asarray(grid, dtype=float)
        if self.expressions:
            return np.column_stack([e(grid, order) for e in self.expressions]) if grid.size else \
                np.zeros((0, self.m))
        return np.array([self(t, order) for t in grid]).reshape(grid.size, self.m)

    def sup_estimate(self, horizon, n=4001):
        if self.sup_bound is not None:
            return float(self.sup_bound)
        end = horizon if self.support_end is None else max(horizon, self.support_end)
        vals = self.sample(np.linspace(0.0, end, n))
        sup = float(np.max(np.linalg.norm(vals, axis=1))) if vals.size else 0.0
        if self.tail_value is not None:
            sup = max(sup, float(np.linalg.norm(self.tail_value)))
        return sup

    # constructors -------------------------------------------------------

    @classmethod
    def zero(cls, m):
        return cls(lambda t, order: np.zeros(m), m, max_order=64, kind="analytic", support_end=0.0,
                   tail_value=np.zeros(m), sup_bound=0.0)

    @classmethod
    def from_expressions(cls, sources, names=None, max_order=8):
        """Componentwise expressions in ``t`` (strings or :class:`SignalExpression`)."""
        exprs = tuple(s if isinstance(s, SignalExpression) else SignalExpression.parse(s, names)
                      for s in sources)
        if not exprs:
            raise ConfigError("reference needs at least one component")
        m = len(exprs)
        bps = tuple(sorted({b for e in exprs for b in e.breakpoints}))
        exact = sorted({b for e in exprs for b in e.exact_breakpoints}, key=float)
        support_end, tail = _constant_tail(exprs, exact[-1] if exact else None)

        def evaluator(t, order):
            return np.array([e(t, order) for e in exprs])

        return cls(evaluator, m, max_order=max_order, kind="analytic", support_end=support_end,
                   tail_value=tail, breakpoints=bps, expressions=exprs)

    @classmethod
    def from_exosystem(cls, exo, max_order=16):
        def evaluator(t, order):
            return exo.output(t, order)

        return cls(evaluator, exo.m, max_order=max_order, kind="exosystem", exosystem=exo)

    @classmethod
    def from_samples(cls, times, values, degree=5):
        """Interpolating spline through samples; constant after the last sample."""
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        k = min(degree, times.size - 1)
        spline = scipy.interpolate.make_interp_spline(times, values, k=k)
        t_end = float(times[-1])
        tail = values[-1].copy()
        m = values.shape[1]

        def evaluator(t, order):
            if t >= t_end:
                return tail.copy() if order == 0 else np.zeros(m)
            if order > k:
                return np.zeros(m)
            return spline(max(t, times[0]), nu=order)

        return cls(evaluator, m, max_order=16, kind="sampled", support_end=t_end, tail_value=tail,
                   breakpoints=(t_end,))


def _constant_tail(exprs, end):
    """Support end and tail value if every component is constant after ``end``."""
    s = sp.Symbol("s", positive=True)
    tail = []
    for e in exprs:
        shifted = e.expr.subs(T, end + s) if end is not None else e.expr
        try:
            shifted = sp.piecewise_fold(shifted)
        except Exception:
            pass
        if shifted.free_symbols & {s, T}:
            return None, None
        tail.append(float(shifted))
    return (float(end) if end is not None else 0.0), np.array(tail)


# ---------------------------------------------------------------------------
# initial value of the generator


def _decay_rate(q2, tol_axis):
    if q2.shape[0] == 0:
        return np.inf
    mu = float(np.min(np.linalg.eigvals(q2).real))
    if mu <= tol_axis:
        raise SlowDecay(f"anti-stable block has min Re(eig) = {mu:.3e}, no decay margin")
    return mu


def _z2_integral(split, y_ref, t0=0.0, tol_quad=1e-11, max_truncation=1e4):
    """``int_{t0}^inf exp(-Q2 (s - t0)) P2 y_ref(s) ds`` and an error estimate."""
    q2, p2 = split.q2, split.p2
    k2 = q2.shape[0]
    tol_axis = default_axis_tol(q2)
    mu = _decay_rate(q2, tol_axis)

    def integrand(s):
        return expm(-q2, s - t0) @ (p2 @ y_ref(s))

    total = np.zeros(k2)
    err = 0.0
    if y_ref.support_end is not None and y_ref.tail_value is not None:
        end = y_ref.support_end
        if end > t0:
            pts = [b for b in y_ref.breakpoints if t0 < b < end]
            val, e = scipy.integrate.quad_vec(integrand, t0, end, epsabs=tol_quad, epsrel=tol_quad,
                                              points=pts or None, limit=2000)
            total += val
            err += float(e)
        tail_start = max(end, t0)
        total += expm(-q2, tail_start - t0) @ np.linalg.solve(q2, p2 @ y_ref.tail_value)
        return total, err
    # no constant tail: truncate where the remainder bound drops below tol_quad
    sup_y = y_ref.sup_estimate(max(10.0, t0 + 10.0))
    p2n = np.linalg.norm(p2, 2)
    horizon = 10.0 / mu
    while True:
        bound = np.linalg.norm(expm(-q2, horizon), 2) * sup_y * p2n / mu
        if bound <= tol_quad or horizon >= max_truncation:
            break
        horizon *= 1.5
    pts = [b for b in y_ref.breakpoints if t0 < b < t0 + horizon]
    val, e = scipy.integrate.quad_vec(integrand, t0, t0 + horizon, epsabs=tol_quad, epsrel=tol_quad,
                                      points=pts or None, limit=4000)
    return val, float(e) + float(bound)


def eta2_ref0_quadrature(split, y_ref, t0=0.0, tol_quad=1e-11):
    """Initial generator state placing the anti-stable component on the bounded solution.

    Raises
    ------
    SlowDecay
        If the anti-stable block has no decay margin.
    """
    n = split.w_transform.shape[0]
    if split.k2 == 0:
        return np.zeros(n)
    z2, _ = _z2_integral(split, y_ref, t0, tol_quad)
    return split.selector(2) @ (-z2)


def eta2_ref0_sylvester(split, exo):
    """Closed-form initial state for an exosystem reference."""
    n = split.w_transform.shape[0]
    if split.k2 == 0:
        return np.zeros(n)
    x = solve_sylvester(split.q2, exo.a_e, split.p2 @ exo.c_e)
    return split.selector(2) @ (-(x @ exo.w0))


def recompute_generator_state(split, y_ref, t, state, tol_quad=1e-11):
    """Replace the anti-stable component of ``state`` by the bounded solution at time ``t``.

    Returns the corrected state and the correction vector.
    """
    state = np.asarray(state, dtype=float)
    if split.k2 == 0:
        return state.copy(), np.zeros_like(state)
    z2_new = -_z2_integral(split, y_ref, t, tol_quad)[0]
    z2_old = split.component(2) @ state
    correction = split.selector(2) @ (z2_new - z2_old)
    return state + correction, correction


# ---------------------------------------------------------------------------
# generator


class ReferenceGenerator:
    """Online generator of ``yhat_ref`` and its derivatives.

    ``yhat_ref^(j) = K Qt^j eta + sum_{p=0}^{j-ell} K Qt^{j-1-p} Pt y_ref^(p)``.
    """

    def __init__(self, red, split, y_ref, eta2_ref0):
        self.red = red
        self.split = split
        self.y_ref = y_ref
        self.ell = red.ell
        self.m = red.m
        self.r = red.r
        self.q_tilde = red.q_tilde
        self.p_tilde = red.p_tilde
        self.k_row = red.k_row
        self.eta2_ref0 = np.asarray(eta2_ref0, dtype=float).reshape(self.ell * self.m)
        self.max_order = red.order
        q = self.q_tilde
        powers = [np.eye(q.shape[0])]
        for _ in range(self.max_order + 1):
            powers.append(q @ powers[-1])
        self.kq = [self.k_row @ pw for pw in powers[:self.max_order + 1]]
        self.coeffs = [
            [self.k_row @ powers[j - 1 - p] @ self.p_tilde for p in range(0, j - self.ell + 1)]
            for j in range(self.max_order + 1)
        ]

    @property
    def dim(self):
        return self.ell * self.m

    def rhs(self, t, eta):
        return self.q_tilde @ eta + self.p_tilde @ self.y_ref(t)

    def derivatives(self, t, eta, max_order=None):
        """Rows ``yhat_ref^(0..max_order)(t)`` for generator state ``eta``."""
        max_order = self.max_order if max_order is None else max_order
        if max_order > self.max_order:
            raise ValueError(f"order {max_order} exceeds r + ell = {self.max_order}")
        out = np.empty((max_order + 1, self.m))
        if self.ell == 0:
            for j in range(max_order + 1):
                out[j] = self.y_ref(t, j)
            return out
        needed = max(-1, max_order - self.ell)
        yr = [self.y_ref(t, p) for p in range(needed + 1)]
        for j in range(max_order + 1):
            v = self.kq[j] @ eta
            for p, c in enumerate(self.coeffs[j]):
                v = v + c @ yr[p]
            out[j] = v
        return out

    def trajectory(self, grid, eta0=None, rtol=1e-11, atol=1e-13):
        eta0 = self.eta2_ref0 if eta0 is None else np.asarray(eta0, dtype=float)
        grid = np.asarray(grid, dtype=float)
        res = integrate(self.rhs, (grid[0], grid[-1]), eta0, t_eval=grid, rtol=rtol, atol=atol,
                        breakpoints=self.y_ref.breakpoints)
        return res.y


def generate_reference(gen, t, order, eta=None):
    """``yhat_ref^(order)(t)``; ``eta`` defaults to the initial state at ``t = 0``."""
    if order < 0 or order > gen.max_order:
        raise ValueError(f"order must lie in [0, {gen.max_order}]")
    eta = gen.eta2_ref0 if eta is None else eta
    return gen.derivatives(t, eta, order)[order]


def antistable_bound(split, y_ref, horizon):
    """``int_0^inf ||exp(-Q2 s)|| ds * ||P2|| * sup ||y_ref||``."""
    if split.k2 == 0:
        return 0.0
    q2 = split.q2
    mu = _decay_rate(q2, default_axis_tol(q2))
    integral, _ = scipy.integrate.quad(lambda s: np.linalg.norm(expm(-q2, s), 2), 0.0, np.inf,
                                       limit=500)
    if not math.isfinite(integral):
        integral = 50.0 / mu
    return float(integral * np.linalg.norm(split.p2, 2) * y_ref.sup_estimate(horizon))


def boundedness_audit(gen, horizon, eta0=None, factor=10.0, n_grid=2001):
    """Integrate the generator and look for divergence of its anti-stable part.

    Fails if ``||z2(t)||`` exceeds ``factor * max(b2, ||z2(0)||)`` with ``b2``
    from :func:`antistable_bound`.  Also reports the suprema of
    ``yhat_ref^(j)``, ``j <= r + ell``.
    """
    split = gen.split
    grid = np.linspace(0.0, horizon, n_grid)
    eta0 = gen.eta2_ref0 if eta0 is None else np.asarray(eta0, dtype=float)
    if gen.dim == 0:
        return Certificate("reference_boundedness", True, {"z2_sup": 0.0}, "no generator state")
    states = gen.trajectory(grid, eta0)
    z2 = states @ split.component(2).T
    z2n = np.linalg.norm(z2, axis=1)
    b2 = antistable_bound(split, gen.y_ref, horizon)
    limit = factor * max(b2, float(z2n[0]) if z2n.size else 0.0, 1e-300)
    exceeded = np.flatnonzero(z2n > limit)
    sup_derivs = []
    for j in range(gen.max_order + 1):
        vals = np.array([gen.derivatives(t, s, j)[j] for t, s in zip(grid[::10], states[::10])])
        sup_derivs.append(float(np.max(np.linalg.norm(vals, axis=1))))
    passed = exceeded.size == 0 and np.all(np.isfinite(states))
    first = float(grid[exceeded[0]]) if exceeded.size else None
    return Certificate(
        "reference_boundedness", bool(passed),
        {"z2_sup": float(z2n.max()), "z2_initial": float(z2n[0]), "b2": b2, "limit": limit,
         "first_exceedance_time": first, "yhat_derivative_sups": sup_derivs},
        "generator state bounded" if passed else "generator state diverges",
    )

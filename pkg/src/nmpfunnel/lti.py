"""Linear plants, strict relative degree and the Byrnes-Isidori normal form.

The plant is

    x' = A x + B u + d(t),   y = C x,

with as many inputs as outputs.  :func:`byrnes_isidori` returns a state
transformation ``U`` with ``U x = (y, y', ..., y^(r-1), eta)`` together with
the coefficients of the output chain and of the internal dynamics.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .certificates import Certificate
from .errors import CompletionFailure, NearSingularMarkovParameter, NoStrictRelativeDegree
from .numlin import as_matrix, numerical_rank
from .ode import integrate

__all__ = [
    "DisturbanceModel",
    "LtiSystem",
    "RelativeDegree",
    "NormalForm",
    "relative_degree",
    "disturbance_matching",
    "byrnes_isidori",
    "normal_form_residual",
    "simulate_open_loop",
]

DEFAULT_TOL_ZERO = 1e-9
DEFAULT_TOL_INV = 1e-10


@dataclass(frozen=True)
class DisturbanceModel:
    """Additive state disturbance ``d(t)``.

    ``evaluator`` must be a deterministic function of time returning a vector
    of length ``n``; ``None`` means ``d = 0``.  ``breakpoints`` lists times at
    which ``d`` may be non-smooth.
    """

    n: int
    evaluator: Optional[Callable[[float], np.ndarray]] = None
    sup_bound: Optional[float] = None
    breakpoints: tuple = ()

    @classmethod
    def zero(cls, n):
        return cls(n=n, evaluator=None, sup_bound=0.0)

    @property
    def is_zero(self):
        return self.evaluator is None

    def __call__(self, t):
        if self.evaluator is None:
            return np.zeros(self.n)
        return np.asarray(self.evaluator(t), dtype=float).reshape(self.n)

    def sample(self, grid):
        """Values on ``grid`` as an array of shape ``(len(grid), n)``."""
        grid = np.asarray(grid, dtype=float)
        if self.evaluator is None:
            return np.zeros((grid.size, self.n))
        return np.array([self(t) for t in grid])

    def audit(self, grid):
        """Check finiteness and the declared bound on ``grid``."""
        values = self.sample(grid)
        norms = np.linalg.norm(values, axis=1) if values.size else np.zeros(0)
        finite = bool(np.all(np.isfinite(values)))
        observed = float(norms.max()) if norms.size else 0.0
        within = self.sup_bound is None or observed <= self.sup_bound * (1 + 1e-12)
        return Certificate(
            "disturbance_bound",
            finite and within,
            {"observed_sup": observed, "declared_sup": self.sup_bound},
        )


@dataclass(frozen=True)
class LtiSystem:
    """Square linear plant ``(A, B, C)`` with disturbance and initial state."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    disturbance: Optional[DisturbanceModel] = None
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        a = as_matrix(self.a, name="A")
        n = a.shape[0]
        if a.shape != (n, n):
            raise ValueError(f"A must be square, got shape {a.shape}")
        b = as_matrix(self.b, rows=n, name="B") if np.ndim(self.b) == 2 else as_matrix(
            np.reshape(self.b, (n, -1)), rows=n, name="B")
        m = b.shape[1]
        c = as_matrix(self.c, cols=n, name="C") if np.ndim(self.c) == 2 else as_matrix(
            np.reshape(self.c, (-1, n)), cols=n, name="C")
        if m < 1 or c.shape[0] != m:
            raise ValueError(f"need as many outputs as inputs, got B {b.shape} and C {c.shape}")
        if n < m:
            raise ValueError("state dimension must be at least the number of inputs")
        x0 = np.zeros(n) if self.x0 is None else np.asarray(self.x0, dtype=float).reshape(n)
        if not np.all(np.isfinite(x0)):
            raise ValueError("x0 has non-finite entries")
        dist = self.disturbance if self.disturbance is not None else DisturbanceModel.zero(n)
        if dist.n != n:
            raise ValueError(f"disturbance has dimension {dist.n}, expected {n}")
        for name, value in (("a", a), ("b", b), ("c", c), ("x0", x0), ("disturbance", dist)):
            object.__setattr__(self, name, value)

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def m(self):
        return self.b.shape[1]

    def markov(self, k):
        """Markov parameter ``C A^k B``."""
        return self.c @ np.linalg.matrix_power(self.a, k) @ self.b

    def with_output(self, c):
        return LtiSystem(self.a, self.b, c, self.disturbance, self.x0)


# ---------------------------------------------------------------------------
# relative degree


@dataclass(frozen=True)
class RelativeDegree:
    """Result of :func:`relative_degree`.

    ``markov_norms[k]`` and ``thresholds[k]`` hold ``||C A^k B||`` and the
    zero threshold used for it; ``condition`` is the condition number of the
    high-gain matrix ``gamma``.
    """

    r: int
    gamma: np.ndarray
    markov_norms: tuple
    thresholds: tuple
    condition: float

    def certificate(self):
        return Certificate(
            "relative_degree",
            True,
            {"r": self.r, "gamma_condition": self.condition,
             "markov_norms": list(self.markov_norms), "zero_thresholds": list(self.thresholds)},
            f"strict relative degree {self.r}",
        )


def relative_degree(sys, r_max=None, tol_zero=DEFAULT_TOL_ZERO, tol_inv=DEFAULT_TOL_INV):
    """Strict relative degree of ``sys``.

    ``C A^k B`` counts as zero when its spectral norm is at most
    ``tol_zero * ||C|| ||A||^k ||B||``; the first nonzero Markov parameter
    must be invertible with condition number at most ``1 / tol_inv``.

    Raises
    ------
    NoStrictRelativeDegree
        If a nonzero Markov parameter is rank deficient, or all parameters up
        to ``r_max`` vanish.
    NearSingularMarkovParameter
        If the first nonzero Markov parameter has full numerical rank but is
        too ill-conditioned.
    """
    n, m = sys.n, sys.m
    r_max = n if r_max is None else int(r_max)
    norm_a = np.linalg.norm(sys.a, 2)
    base = np.linalg.norm(sys.c, 2) * np.linalg.norm(sys.b, 2)
    norms, thresholds = [], []
    power = np.eye(n)
    for k in range(r_max):
        mk = sys.c @ power @ sys.b
        nk = float(np.linalg.norm(mk, 2))
        thr = tol_zero * base * norm_a ** k
        norms.append(nk)
        thresholds.append(thr)
        if nk > thr:
            cond = float(np.linalg.cond(mk))
            if cond <= 1.0 / tol_inv:
                return RelativeDegree(k + 1, mk, tuple(norms), tuple(thresholds), cond)
            diag = [{"k": j, "norm": v, "threshold": t} for j, (v, t) in enumerate(zip(norms, thresholds))]
            if numerical_rank(mk, rtol=tol_inv) < m:
                raise NoStrictRelativeDegree(
                    f"C A^{k} B is nonzero (norm {nk:.3e}) but rank deficient", diagnostics=diag)
            raise NearSingularMarkovParameter(
                f"C A^{k} B has condition number {cond:.3e} above {1 / tol_inv:.1e}", diagnostics=diag)
        power = power @ sys.a
    raise NoStrictRelativeDegree(
        f"all Markov parameters up to order {r_max - 1} vanish",
        diagnostics=[{"k": j, "norm": v, "threshold": t} for j, (v, t) in enumerate(zip(norms, thresholds))],
    )


def disturbance_matching(sys, r, horizon=10.0, n_grid=201, tol_zero=DEFAULT_TOL_ZERO):
    """Check ``C A^k d(t) = 0`` for ``k <= r - 2`` on a uniform grid.

    Returns a certificate whose residuals hold the maximal norm per ``k``.
    """
    grid = np.linspace(0.0, horizon, n_grid)
    values = sys.disturbance.sample(grid)
    scale = max(1.0, float(np.max(np.linalg.norm(values, axis=1))) if values.size else 1.0)
    norm_a = np.linalg.norm(sys.a, 2)
    residuals, passed = {}, True
    power = np.eye(sys.n)
    for k in range(max(r - 1, 0)):
        res = np.linalg.norm(values @ (sys.c @ power).T, axis=1)
        worst = float(res.max()) if res.size else 0.0
        thr = tol_zero * np.linalg.norm(sys.c, 2) * max(norm_a, 1.0) ** k * scale
        residuals[f"k={k}"] = worst
        residuals[f"threshold_k={k}"] = thr
        passed &= worst <= thr
        power = power @ sys.a
    msg = "disturbance enters at or below the input channel" if passed else \
        "disturbance enters the output chain above the input channel"
    return Certificate("disturbance_matching", bool(passed), residuals, msg, {"grid_points": n_grid})


# ---------------------------------------------------------------------------
# normal form


@dataclass(frozen=True)
class NormalForm:
    """Byrnes-Isidori data.

    ``u_transform @ x = (y, y', ..., y^(r-1), eta)`` and

        y^(r) = sum_i R_i y^(i-1) + S eta + Gamma u + d_r,
        eta'  = P y + Q eta + d_eta,

    with ``(d_r, d_eta)`` read off from ``u_transform @ d``.
    """

    r: int
    m: int
    u_transform: np.ndarray
    u_inverse: np.ndarray
    r_coeffs: tuple
    s: np.ndarray
    p: np.ndarray
    q: np.ndarray
    gamma: np.ndarray
    internal_rows: np.ndarray = field(default=None)

    @property
    def n(self):
        return self.u_transform.shape[0]

    @property
    def n_eta(self):
        return self.q.shape[0]

    def matrices(self):
        """``(A_bif, B_bif)`` of the transformed state ``(y, ..., y^(r-1), eta)``."""
        n, m, r = self.n, self.m, self.r
        a = np.zeros((n, n))
        b = np.zeros((n, m))
        for i in range(r - 1):
            a[i * m:(i + 1) * m, (i + 1) * m:(i + 2) * m] = np.eye(m)
        rows = slice((r - 1) * m, r * m)
        for i, ri in enumerate(self.r_coeffs):
            a[rows, i * m:(i + 1) * m] = ri
        a[rows, r * m:] = self.s
        a[r * m:, :m] = self.p
        a[r * m:, r * m:] = self.q
        b[rows] = self.gamma
        return a, b

    def split_disturbance(self, d):
        """``(d_r, d_eta)`` for a disturbance vector (or rows of vectors)."""
        z = np.asarray(d, dtype=float) @ self.u_transform.T
        m, r = self.m, self.r
        return z[..., (r - 1) * m:r * m], z[..., r * m:]


def _block_stacks(a, b, c, r):
    obs = [c]
    ctr = [b]
    for _ in range(r - 1):
        obs.append(obs[-1] @ a)
        ctr.append(a @ ctr[-1])
    return np.vstack(obs), np.hstack(ctr)


def _select_rows(v0, rtol=1e-3):
    """Pick unit rows, scanning from the last coordinate, with ``E @ v0`` well conditioned."""
    n, k = v0.shape
    chosen = []
    basis = np.zeros((0, k))
    for i in reversed(range(n)):
        row = v0[i]
        if basis.shape[0]:
            row = row - basis.T @ (basis @ row)
        nrm = np.linalg.norm(row)
        if nrm > rtol:
            chosen.append(i)
            basis = np.vstack([basis, row / nrm])
            if len(chosen) == k:
                return chosen
    # fall back to column-pivoted QR, which always finds an invertible selection
    _, _, piv = scipy.linalg.qr(v0.T, pivoting=True)
    return list(piv[:k])


def byrnes_isidori(sys, r, tol=1e-9):
    """Normal form of ``sys`` with strict relative degree ``r``.

    The first ``r m`` rows of ``U`` are ``C, CA, ..., CA^{r-1}``.  The internal
    coordinates are coordinates of the projection of ``x`` onto
    ``ker [C; ...; CA^{r-1}]`` along ``im [B, ..., A^{r-1} B]``, read off at a
    set of unit rows chosen so that the map is well conditioned.  This makes
    ``eta`` independent of the input and of ``y', ..., y^(r-1)``.

    Raises
    ------
    CompletionFailure
        If no well-conditioned complement exists.
    """
    a, b, c = sys.a, sys.b, sys.c
    n, m = sys.n, sys.m
    rm = r * m
    if rm > n:
        raise CompletionFailure(f"r*m = {rm} exceeds the state dimension {n}")
    obs, ctr = _block_stacks(a, b, c, r)
    hankel = obs @ ctr
    if np.linalg.cond(hankel) > 1e12:
        raise CompletionFailure("output and input chains are not complementary")
    hankel_inv = np.linalg.inv(hankel)
    gamma = sys.markov(r - 1)
    k = n - rm
    if k:
        v0 = scipy.linalg.null_space(obs, rcond=1e-12)
        if v0.shape[1] != k:
            raise CompletionFailure(f"kernel of the output chain has dimension {v0.shape[1]}, expected {k}")
        rows = _select_rows(v0)
        ev0 = v0[rows]
        if np.linalg.cond(ev0) > 1e12:
            raise CompletionFailure("no well-conditioned coordinate selection for the internal state")
        projector = np.eye(n) - ctr @ hankel_inv @ obs
        n_rows = projector[rows]
        v = v0 @ np.linalg.inv(ev0)
    else:
        rows = []
        n_rows = np.zeros((0, n))
        v = np.zeros((n, 0))
    u = np.vstack([obs, n_rows])
    u_inv = np.hstack([ctr @ hankel_inv, v])
    if np.linalg.norm(u @ u_inv - np.eye(n)) > 1e-6:
        raise CompletionFailure("state transformation failed to invert")

    top = obs[(r - 1) * m:] @ a @ u_inv  # C A^r U^{-1}
    r_coeffs = tuple(top[:, i * m:(i + 1) * m].copy() for i in range(r))
    s = top[:, rm:].copy()
    gamma_inv = np.linalg.inv(gamma)
    p = n_rows @ np.linalg.matrix_power(a, r) @ b @ gamma_inv if k else np.zeros((0, m))
    q = n_rows @ a @ v if k else np.zeros((0, 0))
    return NormalForm(r, m, u, u_inv, r_coeffs, s, p, q, gamma, np.array(rows, dtype=int))


def normal_form_residual(sys, nf):
    """Largest deviation of ``U A U^{-1}`` and ``U B`` from the normal-form pattern."""
    a_bif, b_bif = nf.matrices()
    ra = np.linalg.norm(nf.u_transform @ sys.a @ nf.u_inverse - a_bif)
    rb = np.linalg.norm(nf.u_transform @ sys.b - b_bif)
    return float(ra), float(rb)


def simulate_open_loop(sys, u, horizon, *, t_eval=None, rtol=1e-10, atol=1e-12,
                       breakpoints=(), max_step=np.inf):
    """Integrate the plant under the open-loop input ``u(t)``.

    Returns
    -------
    OdeResult
        States in ``result.y`` with shape ``(len(t), n)``.
    """
    a, b = sys.a, sys.b
    dist = sys.disturbance

    def rhs(t, x):
        return a @ x + b @ np.atleast_1d(u(t)) + dist(t)

    bps = tuple(breakpoints) + tuple(dist.breakpoints)
    return integrate(rhs, (0.0, horizon), sys.x0, t_eval=t_eval, rtol=rtol, atol=atol,
                     breakpoints=bps, max_step=max_step)

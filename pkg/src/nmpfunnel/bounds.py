"""A-priori transient bounds for the funnel cascade.

For each level ``i <= N - 2`` the scalar initial value problem

    eps' = psi_i' - psi_{i+1} + psi_i (psi_i - eps) / (2 eps),
    eps(0) = psi_i(0) - ||e_i(0)||,

yields a time-varying margin with ``||e_i(t)|| <= psi_i(t) - eps_i(t)``.
From these margins a recursion over tables ``N, L, Phi, Sigma, K, M``
produces ``Khat_i`` and the envelope

    ||e(t)|| <= Psi(t) = sum_{i=1}^{ell+1} alpha_i (psi_{i-1}(t) + Khat_{i-2}(t))

for the original tracking error.
"""

from dataclasses import dataclass, field
from math import comb

import numpy as np

from .certificates import Certificate
from .errors import EnvelopeViolation
from .funnels import reciprocal_derivatives
from .ode import integrate

__all__ = [
    "EpsilonProfile",
    "BoundTables",
    "integrate_epsilon",
    "epsilon_profiles",
    "improved_margin_audit",
    "build_tables",
    "error_bound",
    "error_bound_audit",
    "design_inequality_check",
    "equilibrium_margin",
]

ENVELOPE_TOL = 1e-9


def equilibrium_margin(lam_i, lam_next):
    """Fixed point ``lam_i^2 / (2 lam_{i+1} + lam_i)`` of the constant-funnel margin equation."""
    return lam_i * lam_i / (2.0 * lam_next + lam_i)


@dataclass
class EpsilonProfile:
    """Margin ``eps_i`` on a grid together with its a-priori envelope."""

    index: int
    t: np.ndarray
    eps: np.ndarray
    psi: np.ndarray
    e0_norm: float
    lambda_i: float
    lambda_next: float
    kappa_i: float
    psi_sup: float
    eps_min: float
    eps_max: float
    stats: dict = field(default_factory=dict)

    @property
    def lower_slack(self):
        return self.eps - self.eps_min

    @property
    def upper_slack(self):
        return self.psi - self.eps_max - self.eps

    def certificate(self, tol=ENVELOPE_TOL):
        lo = float(self.lower_slack.min())
        hi = float(self.upper_slack.min())
        passed = lo >= -tol and hi >= -tol
        return Certificate(
            f"epsilon_envelope_{self.index}", passed,
            {"lower_slack": lo, "upper_slack": hi, "eps_min": self.eps_min, "eps_max": self.eps_max,
             "lambda": self.lambda_i, "kappa": self.kappa_i},
            "" if passed else "margin left its a-priori envelope; integration is inaccurate",
        )


def _kappa(spec, i, horizon, n_audit):
    grid = np.linspace(0.0, horizon, n_audit)
    f, g = spec[i], spec[i + 1]
    vals = np.abs(np.broadcast_to(g.psi(grid), grid.shape) - np.broadcast_to(f.psi(grid, 1), grid.shape))
    kappa = float(vals.max())
    if g.limit is not None and f.limit is not None:
        # both boundaries settle, so psi_i' -> 0 and the tail contributes |lim psi_{i+1}|
        kappa = max(kappa, abs(float(g.limit)))
    return kappa


def integrate_epsilon(spec, i, e_i0_norm, horizon, *, n_report=2001, grid=None, rtol=1e-11, atol=1e-13,
                      n_audit=10001, check=True):
    """Solve the margin equation of level ``i`` on ``[0, horizon]``.

    Parameters
    ----------
    spec : FunnelSpec
    i : int
        Level, ``0 <= i <= len(spec) - 2``.
    e_i0_norm : float
        ``||e_i(0)||``; must be smaller than ``psi_i(0)``.
    grid : array_like, optional
        Report grid; defaults to ``n_report`` uniform points.
    check : bool
        Raise :class:`EnvelopeViolation` when the envelope fails.

    Returns
    -------
    EpsilonProfile
    """
    if not 0 <= i <= len(spec) - 2:
        raise ValueError(f"level {i} has no margin equation (need 0 <= i <= {len(spec) - 2})")
    f, g = spec[i], spec[i + 1]
    psi0 = float(f.psi(0.0))
    e_i0_norm = float(e_i0_norm)
    if not 0.0 <= e_i0_norm < psi0:
        raise ValueError(f"need 0 <= ||e_{i}(0)|| < psi_{i}(0) = {psi0}, got {e_i0_norm}")
    grid = np.linspace(0.0, horizon, n_report) if grid is None else np.asarray(grid, dtype=float)

    def rhs(t, y):
        p = f.psi(t)
        return np.array([f.psi(t, 1) - g.psi(t) + p * (p - y[0]) / (2.0 * y[0])])

    res = integrate(rhs, (0.0, float(grid[-1])), [psi0 - e_i0_norm], t_eval=grid, rtol=rtol, atol=atol)
    lam_i = f.inf_psi(horizon)
    lam_next = g.inf_psi(horizon)
    kappa = _kappa(spec, i, horizon, n_audit)
    sup = f.sup_psi(horizon)
    eps_min = min(lam_i * lam_i / (2.0 * kappa + sup), psi0 - e_i0_norm)
    eps_max = min(lam_next * lam_i / sup, lam_i / 2.0, e_i0_norm)
    psi = np.broadcast_to(f.psi(grid), grid.shape).astype(float)
    prof = EpsilonProfile(i, grid, res.y[:, 0].copy(), psi, e_i0_norm, lam_i, lam_next, kappa, sup,
                          eps_min, eps_max, {"n_steps": res.n_steps, "nfev": res.nfev})
    if check:
        cert = prof.certificate()
        if not cert.passed:
            raise EnvelopeViolation(f"margin {i}: {cert.residuals}")
    return prof


def epsilon_profiles(spec, e0_norms, horizon, **options):
    """Profiles for all levels ``0..N-2`` from the initial error norms ``||e_i(0)||``."""
    return [integrate_epsilon(spec, i, e0_norms[i], horizon, **options) for i in range(len(spec) - 1)]


def improved_margin_audit(traj, profiles, tol=ENVELOPE_TOL):
    """Check ``||e_i(t)|| <= psi_i(t) - eps_i(t)`` on the trajectory grid."""
    norms = traj.error_norms
    slacks = []
    for prof in profiles:
        if prof.t.shape != traj.t.shape or not np.allclose(prof.t, traj.t, rtol=0, atol=1e-12):
            raise ValueError("profile and trajectory grids differ")
        slacks.append(prof.psi - prof.eps - norms[:, prof.index])
    worst = [float(s.min()) for s in slacks]
    where = [float(traj.t[int(np.argmin(s))]) for s in slacks]
    passed = all(w >= -tol for w in worst)
    return Certificate("improved_margin", passed, {"min_slack": worst, "time_of_min": where},
                       "" if passed else "an error exceeded its improved margin")


# ---------------------------------------------------------------------------
# recursion tables


@dataclass
class BoundTables:
    """Pointwise tables on ``t``; entries are keyed by ``(i, j)``."""

    t: np.ndarray
    n: dict
    l: dict
    phi: dict
    sigma: dict
    k: dict
    m: dict
    hat_k: dict
    alphas: np.ndarray = None
    psi_bound: np.ndarray = None

    def k_hat(self, i):
        return self.hat_k[i]


def _phi_derivatives(spec, i, grid, order):
    psi = np.array([np.broadcast_to(spec[i].psi(grid, k), grid.shape) for k in range(order + 1)], dtype=float)
    return np.abs(reciprocal_derivatives(psi))


def build_tables(spec, profiles, grid=None):
    """Evaluate the recursion tables and ``Khat_{-1..N-2}`` on ``grid``.

    Empty sums are zero.  ``profiles[i]`` must carry ``eps_i`` on ``grid``.
    """
    levels = len(spec)
    if len(profiles) < levels - 1:
        raise ValueError(f"need {levels - 1} margin profiles, got {len(profiles)}")
    grid = profiles[0].t if grid is None else np.asarray(grid, dtype=float)
    for prof in profiles:
        if prof.t.shape != grid.shape or not np.allclose(prof.t, grid, rtol=0, atol=1e-12):
            raise ValueError("profile grid does not match the table grid")
    eps = {p.index: p.eps for p in profiles}
    n_t, l_t, ph_t, s_t, k_t, m_t = {}, {}, {}, {}, {}, {}
    for i in range(levels):
        n_t[(i, 0)] = np.broadcast_to(spec[i].psi(grid), grid.shape).astype(float)

    # the recursion for N_{i,j} reaches into level i+1, so fill levels bottom-up
    for i in range(levels - 2, -1, -1):
        top = levels - i - 1
        dphi = _phi_derivatives(spec, i, grid, top)
        k_t[(i, 0)] = n_t[(i, 0)] / eps[i]
        m_t[(i, 0)] = n_t[(i, 0)] * k_t[(i, 0)]
        l_t[(i, 0)] = n_t[(i, 0)] ** 2
        ph_t[(i, 0)] = dphi[0] ** 2
        for j in range(1, top + 1):
            ph_t[(i, j)] = 2.0 * sum(comb(j - 1, q) * dphi[q] * dphi[j - q] for q in range(j))

        def n_of(j):
            if (i, j) not in n_t:
                n_t[(i, j)] = n_t[(i + 1, j - 1)] + m_t[(i, j - 1)]
            return n_t[(i, j)]

        def l_of(j):
            if (i, j) not in l_t:
                l_t[(i, j)] = 2.0 * sum(comb(j - 1, q) * n_of(q) * n_of(j - q) for q in range(j))
            return l_t[(i, j)]

        def sigma_of(j):
            if (i, j) in s_t:
                return s_t[(i, j)]
            val = 0.5 * (ph_t[(i, 0)] * l_of(j + 1) + ph_t[(i, 1)] * l_of(j) + ph_t[(i, j)] * l_of(1)
                         + l_of(0) * ph_t[(i, j + 1)])
            for a in range(1, j):
                inner_n = sum(comb(j - a, b) * n_of(b) * n_of(j - a - b) for b in range(j - a + 1))
                inner_phi = sum(comb(a, b) * dphi[b] * dphi[a - b] for b in range(a + 1))
                val = val + comb(j, a) * (ph_t[(i, a)] * inner_n + l_of(j - a) * inner_phi)
            s_t[(i, j)] = val
            return val

        for j in range(1, top + 1):
            n_of(j)
            val = k_t[(i, 0)] ** 2 * sigma_of(j - 1)
            for a in range(1, j):
                for b in range(a):
                    val = val + (comb(j - 1, a) * comb(a - 1, b) * sigma_of(j - a - 1)
                                 * k_t[(i, b + 1)] * k_t[(i, a - b - 1)])
            k_t[(i, j)] = val
            m_t[(i, j)] = sum(comb(j, q) * k_t[(i, q)] * n_of(j - q) for q in range(j + 1))

    hat_k = {-1: np.zeros_like(grid)}
    for i in range(levels - 1):
        hat_k[i] = sum(m_t[(j, i - j)] for j in range(i + 1))
    return BoundTables(grid, n_t, l_t, ph_t, s_t, k_t, m_t, hat_k)


def error_bound(red, tables, spec=None):
    """Envelope ``Psi(t)`` on the table grid; stores ``alphas`` and ``psi_bound`` on ``tables``.

    ``red`` may be a redefinition (its ``alphas`` are used) or a sequence of
    the ``ell + 1`` weights directly.
    """
    alphas = np.asarray(getattr(red, "alphas", red), dtype=float)
    ell = alphas.size - 1
    if spec is None:
        psi = {i: tables.n[(i, 0)] for i in range(ell + 1)}
    else:
        psi = {i: np.broadcast_to(spec[i].psi(tables.t), tables.t.shape) for i in range(ell + 1)}
    total = np.zeros_like(tables.t)
    for idx in range(1, ell + 2):
        if alphas[idx - 1] == 0.0:
            continue
        total = total + alphas[idx - 1] * (psi[idx - 1] + tables.hat_k[idx - 2])
    tables.alphas = alphas
    tables.psi_bound = total
    return total


def error_bound_audit(traj, psi_bound):
    """``||e(t)|| <= Psi(t)`` on the trajectory grid."""
    norms = np.linalg.norm(traj.e, axis=1)
    ratio = norms / psi_bound
    k = int(np.argmax(ratio))
    passed = bool(np.all(norms <= psi_bound))
    return Certificate("error_bound", passed,
                       {"max_ratio": float(ratio[k]), "time_of_max": float(traj.t[k]),
                        "min_gap": float(np.min(psi_bound - norms))},
                       "" if passed else "tracking error exceeded its a-priori envelope")


def design_inequality_check(spec, tables, phi_target, alphas=None):
    """Grid check of ``Psi(t) < 1 / phi_target(t)``.

    Reports the largest ratio ``Psi / psi_target`` and where it occurs;
    a ratio above one means the funnel boundaries should shrink.
    """
    psi_bound = tables.psi_bound if alphas is None else error_bound(alphas, tables, spec)
    if psi_bound is None:
        raise ValueError("call error_bound first or pass alphas")
    target = np.broadcast_to(phi_target.psi(tables.t), tables.t.shape)
    ratio = psi_bound / target
    k = int(np.argmax(ratio))
    passed = bool(ratio[k] < 1.0)
    return Certificate("design_inequality", passed,
                       {"max_ratio": float(ratio[k]), "time_of_max": float(tables.t[k])},
                       "" if passed else "shrink the funnel boundaries of the lower levels")

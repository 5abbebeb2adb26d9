"""Funnel functions and truncated Taylor (jet) arithmetic.

A funnel is described by its boundary ``psi = 1 / phi``.  Derivatives of
``phi`` follow from ``phi * psi = 1`` by the recurrence

    phi^(k) = -(1 / psi) * sum_{j<k} binom(k, j) phi^(j) psi^(k-j).

Jets are arrays whose leading axis indexes the derivative order.
"""

import math
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .certificates import Certificate
from .errors import ConfigError
from .expr import SignalExpression

__all__ = [
    "FunnelFunction",
    "FunnelSpec",
    "jet_mul",
    "jet_reciprocal",
    "jet_inner",
]


# ---------------------------------------------------------------------------
# jets


def jet_mul(a, b, order=None):
    """Leibniz product of two scalar jets (arrays over the leading axis)."""
    n = min(len(a), len(b)) if order is None else order + 1
    out = np.zeros((n,) + np.shape(a[0]))
    for q in range(n):
        acc = 0.0
        for p in range(q + 1):
            acc = acc + comb(q, p) * a[p] * b[q - p]
        out[q] = acc
    return out


def jet_reciprocal(g):
    """Jet of ``1 / g``."""
    n = len(g)
    out = np.zeros((n,) + np.shape(g[0]))
    out[0] = 1.0 / g[0]
    for q in range(1, n):
        acc = 0.0
        for p in range(q):
            acc = acc + comb(q, p) * out[p] * g[q - p]
        out[q] = -acc / g[0]
    return out


def jet_inner(e, order=None):
    """Jet of ``<e, e>`` for a vector jet ``e`` of shape ``(n, m)``."""
    n = len(e) if order is None else order + 1
    out = np.zeros(n)
    for q in range(n):
        acc = 0.0
        for p in range(q + 1):
            acc += comb(q, p) * float(e[p] @ e[q - p])
        out[q] = acc
    return out


def reciprocal_derivatives(psi):
    """Derivatives of ``1 / psi`` from those of ``psi`` (leading axis = order)."""
    psi = np.asarray(psi, dtype=float)
    phi = np.zeros_like(psi)
    phi[0] = 1.0 / psi[0]
    for k in range(1, psi.shape[0]):
        acc = np.zeros_like(psi[0])
        for j in range(k):
            acc = acc + comb(k, j) * phi[j] * psi[k - j]
        phi[k] = -acc / psi[0]
    return phi


# ---------------------------------------------------------------------------
# funnel functions


class FunnelFunction:
    """Funnel ``phi`` given through its boundary ``psi = 1 / phi``.

    Parameters
    ----------
    psi : callable
        ``psi(t, order)`` for scalar or array ``t``.
    smoothness : int
        Highest derivative order guaranteed to exist and be bounded.
    limit : float, optional
        ``lim_{t -> inf} psi(t)`` when known; used for infima and suprema
        beyond a finite horizon.
    """

    def __init__(self, psi, smoothness=64, limit=None, family="custom", params=None,
                 sup_bound=None, inf_bound=None):
        self._psi = psi
        self.smoothness = int(smoothness)
        self.limit = limit
        self.family = family
        self.params = dict(params or {})
        self._sup = sup_bound
        self._inf = inf_bound

    def __repr__(self):
        return f"FunnelFunction({self.family}, {self.params})"

    # constructors -------------------------------------------------------

    @classmethod
    def exponential(cls, a, b, c):
        """Boundary ``psi(t) = a exp(-b t) + c`` with ``a >= 0``, ``b >= 0``, ``c > 0``."""
        a, b, c = float(a), float(b), float(c)
        if a < 0 or b < 0 or c <= 0:
            raise ConfigError(f"exponential funnel needs a >= 0, b >= 0, c > 0 (got {a}, {b}, {c})")

        def psi(t, order=0):
            if isinstance(t, (float, int)):
                return a * (-b) ** order * math.exp(-b * t) + (c if order == 0 else 0.0)
            t = np.asarray(t, dtype=float)
            val = a * (-b) ** order * np.exp(-b * t)
            if order == 0:
                val = val + c
            return val if val.ndim else float(val)

        limit = c if b > 0 else a + c
        return cls(psi, 64, limit=limit, family="exponential", params={"a": a, "b": b, "c": c},
                   sup_bound=a + c, inf_bound=limit)

    @classmethod
    def constant(cls, value):
        value = float(value)
        if value <= 0:
            raise ConfigError("constant funnel boundary must be positive")

        def psi(t, order=0):
            if isinstance(t, (float, int)):
                return value if order == 0 else 0.0
            t = np.asarray(t, dtype=float)
            val = np.full(t.shape, value if order == 0 else 0.0)
            return val if val.ndim else float(val)

        return cls(psi, 64, limit=value, family="constant", params={"value": value},
                   sup_bound=value, inf_bound=value)

    @classmethod
    def from_expression(cls, source, names=None, smoothness=8):
        """Boundary given as an expression in ``t``."""
        expr = source if isinstance(source, SignalExpression) else SignalExpression.parse(source, names)

        def psi(t, order=0):
            return expr(t, order)

        return cls(psi, smoothness, limit=expr.limit_at_infinity(), family="expression",
                   params={"psi": expr.source})

    # evaluation ---------------------------------------------------------

    def psi(self, t, order=0):
        if order > self.smoothness:
            raise ValueError(f"derivative order {order} exceeds smoothness {self.smoothness}")
        return self._psi(t, order)

    def psi_derivatives(self, t, n):
        """``psi^(0..n)(t)`` stacked along the first axis."""
        return np.array([self.psi(t, k) for k in range(n + 1)], dtype=float)

    def phi_derivatives(self, t, n):
        """``phi^(0..n)(t)`` stacked along the first axis."""
        return reciprocal_derivatives(self.psi_derivatives(t, n))

    def phi(self, t, order=0):
        return self.phi_derivatives(t, order)[order]

    def __call__(self, t):
        return self.phi(t)

    # summaries ----------------------------------------------------------

    def inf_psi(self, horizon, n=10001):
        """``inf psi`` over ``[0, horizon]`` and the limit (when known)."""
        if self._inf is not None:
            return float(self._inf)
        vals = self.psi(np.linspace(0.0, horizon, n))
        lo = float(np.min(vals))
        if self.limit is not None:
            lo = min(lo, float(self.limit))
        return lo

    def sup_psi(self, horizon, n=10001):
        if self._sup is not None:
            return float(self._sup)
        vals = self.psi(np.linspace(0.0, horizon, n))
        hi = float(np.max(vals))
        if self.limit is not None:
            hi = max(hi, float(self.limit))
        return hi

    def audit(self, horizon, order=None, n=2001):
        """Sampled check of the funnel class conditions up to ``order`` derivatives."""
        order = self.smoothness if order is None else min(order, self.smoothness)
        grid = np.linspace(0.0, horizon, n)
        psi = self.psi_derivatives(grid, order)
        phi = reciprocal_derivatives(psi)
        positive = bool(np.all(psi[0] > 0) and np.all(np.isfinite(psi)))
        finite = bool(np.all(np.isfinite(phi)))
        limit_ok = self.limit is None or (np.isfinite(self.limit) and self.limit > 0)
        sups = [float(np.max(np.abs(row))) for row in phi]
        passed = positive and finite and limit_ok
        return Certificate("funnel_class", passed,
                           {"order": order, "psi0": float(psi[0, 0]), "inf_psi": float(psi[0].min()),
                            "phi_derivative_sups": sups, "limit_psi": self.limit})


@dataclass
class FunnelSpec:
    """Funnels ``phi_0, ..., phi_{N-1}`` for the cascade of length ``N``.

    Level ``i`` needs ``N - i`` bounded derivatives.
    """

    phis: list = field(default_factory=list)

    def __post_init__(self):
        self.phis = list(self.phis)
        n = len(self.phis)
        for i, f in enumerate(self.phis):
            if f.smoothness < n - i:
                raise ConfigError(f"funnel {i} needs {n - i} derivatives, has {f.smoothness}")

    def __len__(self):
        return len(self.phis)

    def __getitem__(self, i):
        return self.phis[i]

    def psi_table(self, grid, order=0):
        """Array ``(len(phis), len(grid))`` of ``psi_i^(order)``."""
        grid = np.asarray(grid, dtype=float)
        return np.array([np.broadcast_to(f.psi(grid, order), grid.shape) for f in self.phis])

    def audit(self, horizon):
        certs = [f.audit(horizon, len(self.phis) - i) for i, f in enumerate(self.phis)]
        return Certificate("funnel_spec", all(c.passed for c in certs), {},
                           details={f"phi_{i}": c.to_dict() for i, c in enumerate(certs)})

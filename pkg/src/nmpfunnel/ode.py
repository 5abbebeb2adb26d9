"""Adaptive integrators with funnel-aware step control.

:func:`integrate` is a Dormand-Prince 5(4) pair with dense output.  Unlike
the generic solvers in scipy, the right-hand side may raise
:class:`~nmpfunnel.errors.StepRejected` to veto a trial step (for example
when a stage would leave the performance funnel).  The step is then halved;
``max_halvings`` consecutive vetoes abort with ``StepSizeUnderflow``.

:func:`integrate_stiff` wraps scipy's Radau IIA method with the same veto
rule for high-gain phases where explicit steps become prohibitively small.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import Radau

from .errors import StepRejected, StepSizeUnderflow

__all__ = ["OdeResult", "integrate", "integrate_stiff"]

C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
]
B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# coefficients of the quartic continuous extension (Shampine 1986)
P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0


@dataclass
class OdeResult:
    t: np.ndarray
    y: np.ndarray  # shape (len(t), n)
    n_steps: int = 0
    n_rejected: int = 0
    n_vetoed: int = 0
    nfev: int = 0
    step_times: list = field(default_factory=list)


def _rms(x):
    return math.sqrt(float(np.dot(x, x)) / x.size) if x.size else 0.0


def _initial_step(fun, t0, y0, f0, rtol, atol, direction_span):
    scale = atol + np.abs(y0) * rtol
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, direction_span)
    try:
        f1 = fun(t0 + h0, y0 + h0 * f0)
    except StepRejected:
        return h0 * 1e-3
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, direction_span)


def integrate(fun, t_span, y0, *, t_eval=None, rtol=1e-8, atol=1e-7, first_step=None,
              max_step=np.inf, breakpoints=(), max_halvings=40, min_step=1e-14):
    """Integrate ``y' = fun(t, y)`` over ``t_span`` (forward in time).

    Parameters
    ----------
    fun : callable
        ``fun(t, y) -> ndarray``.  May raise ``StepRejected``.
    t_span : (t0, t1)
    y0 : array_like
    t_eval : array_like, optional
        Sorted output times inside ``t_span``; defaults to the step times.
    breakpoints : sequence of float
        Times where the right-hand side is not smooth.  Steps never cross
        them, so the error control sees only smooth pieces.
    max_halvings : int
        Consecutive vetoed or rejected steps tolerated before giving up.

    Returns
    -------
    OdeResult
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 < t0:
        raise ValueError("only forward integration is supported")
    y = np.array(y0, dtype=float)
    stops = sorted(b for b in breakpoints if t0 < b < t1) + [t1]
    dense = t_eval is not None
    if dense:
        t_eval = np.asarray(t_eval, dtype=float)
        out = np.empty((t_eval.size, y.size))
        k_eval = 0
        while k_eval < t_eval.size and t_eval[k_eval] <= t0:
            out[k_eval] = y
            k_eval += 1
    else:
        ts, ys = [t0], [y.copy()]

    res = OdeResult(np.empty(0), np.empty((0, y.size)))
    if t1 == t0:
        return _finish(res, dense, t_eval if dense else None, out if dense else None, [t0], [y])

    t = t0
    f = fun(t, y)
    res.nfev += 1
    h = first_step or _initial_step(fun, t, y, f, rtol, atol, stops[0] - t0)
    h = min(h, max_step)
    K = np.empty((7, y.size))
    halvings = 0
    stop_idx = 0

    while t < t1:
        t_stop = stops[stop_idx]
        h = min(h, max_step, t_stop - t)
        if h < min_step * max(1.0, abs(t)):
            # snap onto the stop when only rounding separates us
            if t_stop - t <= min_step * max(1.0, abs(t)) * 4:
                t = t_stop
                stop_idx += 1
                continue
            raise StepSizeUnderflow(f"step size underflow at t={t:.12g}", t=t)
        t_new = t + h
        if t_stop - t_new < 1e-12 * max(1.0, abs(t_stop)):
            t_new = t_stop
            h = t_new - t
        try:
            K[0] = f
            for s in range(1, 6):
                dy = A[s] @ K[:s] * h
                K[s] = fun(t + C[s] * h, y + dy)
            y_new = y + h * (B @ K[:6])
            f_new = fun(t_new, y_new)
            K[6] = f_new
            res.nfev += 6
        except StepRejected as exc:
            res.nfev += 6
            res.n_vetoed += 1
            halvings += 1
            if halvings >= max_halvings:
                raise StepSizeUnderflow(
                    f"{halvings} consecutive vetoed steps at t={t:.12g}: {exc}", t=t, cause=exc
                ) from exc
            h *= 0.5
            continue
        if not np.all(np.isfinite(y_new)):
            halvings += 1
            if halvings >= max_halvings:
                raise StepSizeUnderflow(f"non-finite state at t={t:.12g}", t=t)
            h *= 0.5
            continue

        scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
        err = _rms(h * (E @ K) / scale)
        if err > 1.0:
            res.n_rejected += 1
            halvings += 1
            if halvings >= max_halvings:
                raise StepSizeUnderflow(f"error control failed repeatedly at t={t:.12g}", t=t)
            h *= max(MIN_FACTOR, SAFETY * err ** -0.2)
            continue

        halvings = 0
        if dense:
            Q = K.T @ P
            while k_eval < t_eval.size and t_eval[k_eval] <= t_new:
                x = (t_eval[k_eval] - t) / h
                out[k_eval] = y + h * (Q @ np.array([x, x * x, x ** 3, x ** 4]))
                k_eval += 1
        res.n_steps += 1
        res.step_times.append(t_new)
        t, y, f = t_new, y_new, f_new
        if not dense:
            ts.append(t)
            ys.append(y.copy())
        if t >= t_stop:
            t = t_stop
            stop_idx += 1
            if stop_idx < len(stops):
                # the right-hand side may jump at the breakpoint
                f = fun(t, y)
                res.nfev += 1
        factor = MAX_FACTOR if err == 0 else min(MAX_FACTOR, SAFETY * err ** -0.2)
        h *= factor

    if dense:
        while k_eval < t_eval.size:
            out[k_eval] = y
            k_eval += 1
        return _finish(res, True, t_eval, out, None, None)
    return _finish(res, False, None, None, ts, ys)


def integrate_stiff(fun, t_span, y0, *, t_eval=None, rtol=1e-8, atol=1e-7, first_step=None,
                    max_step=np.inf, breakpoints=(), max_halvings=40, min_step=1e-14):
    """Radau IIA (order 5) counterpart of :func:`integrate`.

    Stage evaluations that raise ``StepRejected`` are reported to the Newton
    solver as non-finite, which makes it shrink the step.  An accepted step
    whose end point is vetoed is discarded and retried from the previous
    state with half the step size.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 < t0:
        raise ValueError("only forward integration is supported")
    y = np.array(y0, dtype=float)
    stops = sorted(b for b in breakpoints if t0 < b < t1) + [t1]
    dense = t_eval is not None
    res = OdeResult(np.empty(0), np.empty((0, y.size)))
    if dense:
        t_eval = np.asarray(t_eval, dtype=float)
        out = np.empty((t_eval.size, y.size))
        k_eval = 0
        while k_eval < t_eval.size and t_eval[k_eval] <= t0:
            out[k_eval] = y
            k_eval += 1
    else:
        ts, ys = [t0], [y.copy()]
    if t1 == t0:
        return _finish(res, dense, t_eval if dense else None, out if dense else None, [t0], [y])

    def guarded(t, x):
        res.nfev += 1
        try:
            return fun(t, x)
        except StepRejected:
            return np.full(x.size, np.nan)

    def vetoed(t, x):
        try:
            fun(t, x)
        except StepRejected:
            return True
        return not np.all(np.isfinite(x))

    t = t0
    h_next = first_step
    for t_stop in stops:
        halvings = 0
        while t < t_stop:
            if t_stop - t <= min_step * max(1.0, abs(t)) * 4:
                t = t_stop
                break
            solver = Radau(guarded, t, y, t_stop, rtol=rtol, atol=atol, max_step=max_step,
                           first_step=None if h_next is None else min(h_next, t_stop - t))
            while solver.status == "running":
                t_old, y_old = solver.t, solver.y.copy()
                msg = solver.step()
                if solver.status == "failed":
                    raise StepSizeUnderflow(f"stiff integrator failed at t={solver.t:.12g}: {msg}", t=solver.t)
                if vetoed(solver.t, solver.y):
                    res.n_vetoed += 1
                    halvings += 1
                    h_next = 0.5 * (solver.t - t_old)
                    if halvings >= max_halvings or h_next < min_step * max(1.0, abs(t_old)):
                        raise StepSizeUnderflow(
                            f"{halvings} consecutive vetoed steps at t={t_old:.12g}", t=t_old)
                    t, y = t_old, y_old
                    break
                halvings = 0
                res.n_steps += 1
                res.step_times.append(solver.t)
                if dense:
                    sol = solver.dense_output()
                    while k_eval < t_eval.size and t_eval[k_eval] <= solver.t:
                        out[k_eval] = sol(t_eval[k_eval])
                        k_eval += 1
                else:
                    ts.append(solver.t)
                    ys.append(solver.y.copy())
                t, y = solver.t, solver.y.copy()
                h_next = solver.step_size
        t = t_stop

    if dense:
        while k_eval < t_eval.size:
            out[k_eval] = y
            k_eval += 1
        return _finish(res, True, t_eval, out, None, None)
    return _finish(res, False, None, None, ts, ys)


def _finish(res, dense, t_eval, out, ts, ys):
    if dense:
        res.t = t_eval
        res.y = out
    else:
        res.t = np.array(ts)
        res.y = np.array(ys)
    return res

import numpy as np
import pytest

from nmpfunnel import (FunnelFunction, FunnelSpec, LtiSystem, ReferenceSignal, simulate_closed_loop,
                       simulate_with_restarts)
from nmpfunnel.errors import FunnelBoundaryReached, InadmissibleInitialCondition
from nmpfunnel.funnel_sim import ClosedLoop, cascade_from_error_jet, evaluate_cascade
from nmpfunnel.refgen import ReferenceGenerator

from conftest import A_BENCH, B_BENCH, C_BENCH

exp = FunnelFunction.exponential


def wide_funnels():
    return FunnelSpec([exp(1, 2, 0.5), exp(2, 2, 1), exp(2, 2, 2)])


def test_cascade_at_zero_error(bench_spec):
    cs = cascade_from_error_jet(bench_spec, 0.7, np.zeros((3, 1)))
    assert np.all(np.array(cs.errors) == 0.0)
    assert np.all(cs.gains == 1.0)
    assert np.all(cs.u == 0.0)


def test_cascade_single_level():
    cs = cascade_from_error_jet(FunnelSpec([FunnelFunction.constant(1.0)]), 0.0, [[0.6]])
    assert cs.gains[0] == pytest.approx(1.5625)
    assert cs.u[0] == pytest.approx(-0.9375)


def test_cascade_rejects_boundary():
    spec = FunnelSpec([FunnelFunction.constant(1.0)])
    with pytest.raises(FunnelBoundaryReached) as info:
        cascade_from_error_jet(spec, 0.0, [[1.0]])
    assert info.value.level == 0


def test_cascade_two_levels_by_hand():
    spec = FunnelSpec([FunnelFunction.constant(2.0), FunnelFunction.constant(1.0)])
    e, de = 0.5, 0.3
    cs = cascade_from_error_jet(spec, 0.0, [[e], [de]])
    k0 = 1.0 / (1.0 - (e / 2.0) ** 2)
    e1 = de + k0 * e
    assert cs.errors[1][0] == pytest.approx(e1)
    assert cs.u[0] == pytest.approx(-e1 / (1.0 - e1 ** 2))


def test_benchmark_invariants(bench_traj):
    cert = bench_traj.funnel_certificate()
    assert cert.passed
    assert np.all(bench_traj.ratios < 1.0)
    assert np.all(np.isfinite(bench_traj.u))
    assert bench_traj.stats["gain_identity_residual"] < 1e-12
    assert np.all(bench_traj.eps_observed > 0)


def test_cascade_derivatives_against_finite_differences(bench_syn, bench_spec, bench_traj):
    """The recursion's derivative of e_i matches a central difference of the recorded e_i."""
    loop = ClosedLoop(bench_syn.sys, bench_syn.red, bench_syn.gen, bench_spec)
    dt = bench_traj.t[1] - bench_traj.t[0]
    for idx in range(600, 1000, 50):
        state = np.concatenate([bench_traj.x[idx], bench_traj.eta[idx]])
        cs = loop.cascade(bench_traj.t[idx], state)
        for level in (0, 1):
            fd = (bench_traj.errors[idx + 1, level] - bench_traj.errors[idx - 1, level]) / (2 * dt)
            assert np.allclose(cs.jets[level][1], fd, rtol=1e-3, atol=1e-4)


def test_evaluate_cascade_coordinates(bench_syn, bench_spec, bench_traj):
    idx = 500
    t, x, eta = bench_traj.t[idx], bench_traj.x[idx], bench_traj.eta[idx]
    a = evaluate_cascade(bench_syn.red, bench_syn.gen, bench_spec, t, x, eta)
    z = bench_syn.nf.u_transform @ x
    b = evaluate_cascade(bench_syn.red, bench_syn.gen, bench_spec, t, z, eta, coordinates="bif")
    assert np.allclose(a.u, b.u, rtol=1e-10)
    assert np.allclose(a.u, bench_traj.u[idx], rtol=1e-10)


def test_zero_run(bench_syn, bench_spec):
    sys = LtiSystem(A_BENCH, B_BENCH, C_BENCH)
    gen = ReferenceGenerator(bench_syn.red, bench_syn.split, ReferenceSignal.zero(1), [0.0])
    traj = simulate_closed_loop(sys, bench_syn.red, gen, bench_spec, 2.0, n_report=101)
    assert np.all(traj.x == 0.0) and np.all(traj.u == 0.0)


def test_inadmissible_initial_state(bench_syn, bench_spec):
    sys = LtiSystem(A_BENCH, B_BENCH, C_BENCH, disturbance=bench_syn.sys.disturbance, x0=[0.0, 0.0, 5.0, 0.0])
    with pytest.raises(InadmissibleInitialCondition) as info:
        simulate_closed_loop(sys, bench_syn.red, bench_syn.gen, bench_spec, 1.0)
    assert max(info.value.ratios) >= 1.0


def test_wrong_number_of_funnels(bench_syn):
    with pytest.raises(ValueError):
        simulate_closed_loop(bench_syn.sys, bench_syn.red, bench_syn.gen, FunnelSpec([exp(1, 1, 1)] * 2), 1.0)


def test_explicit_and_implicit_integrators_agree(bench_syn):
    kw = dict(n_report=201)
    a = simulate_closed_loop(bench_syn.sys, bench_syn.red, bench_syn.gen, wide_funnels(), 2.0, method="dopri5", **kw)
    b = simulate_closed_loop(bench_syn.sys, bench_syn.red, bench_syn.gen, wide_funnels(), 2.0, method="radau", **kw)
    assert np.max(np.abs(a.x - b.x)) < 1e-5
    assert a.stats["method"] == "dopri5" and b.stats["method"] == "radau"


def test_self_convergence(bench_syn, bench_spec, bench_traj):
    tight = simulate_closed_loop(bench_syn.sys, bench_syn.red, bench_syn.gen, bench_spec, 10.0, rtol=1e-9, atol=1e-8)
    assert np.max(np.abs(tight.x - bench_traj.x)) < 1e-5


def test_restarts_without_perturbation_are_idempotent(bench_syn, bench_spec):
    plain = simulate_closed_loop(bench_syn.sys, bench_syn.red, bench_syn.gen, bench_spec, 3.0, n_report=301)
    restarted = simulate_with_restarts(bench_syn.sys, bench_syn.red, bench_syn.gen, bench_spec, 3.0, 1.0, n_report=301)
    assert max(c["correction_norm"] for c in restarted.corrections) < 1e-9
    assert np.max(np.abs(plain.x - restarted.x)) < 1e-5


def test_restart_requires_positive_period(bench_syn, bench_spec):
    with pytest.raises(ValueError):
        simulate_with_restarts(bench_syn.sys, bench_syn.red, bench_syn.gen, bench_spec, 1.0, 0.0)

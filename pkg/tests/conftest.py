import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nmpfunnel import (DisturbanceModel, FunnelFunction, FunnelSpec, LtiSystem, ReferenceSignal, bundled_config,
                       load_config, synthesize)

A_BENCH = np.array([[-1, 1, 0, 0], [0, -3, 0, 1], [1, 0, -2, 0], [0, 0, 3, -1]], dtype=float)
B_BENCH = np.array([[0], [2], [0], [0]], dtype=float)
C_BENCH = np.array([[1, 0, -3, 0]], dtype=float)
YREF_BENCH = "piecewise((1 - cos(t), t <= 2*pi), (0, True))"


def benchmark_disturbance():
    return DisturbanceModel(4, lambda t: np.array([0.0, 0.5 * math.sin(5 * t) + math.cos(8 * t), 0.0,
                                                   math.sin(6 * t) + 0.5 * math.cos(4 * t)]), sup_bound=3.0)


def benchmark_funnels():
    exp = FunnelFunction.exponential
    return FunnelSpec([exp(1, 2, 0.01), exp(2, 2, 0.01), exp(2, 10, 0.01)])


@pytest.fixture(scope="session")
def bench_sys():
    return LtiSystem(A_BENCH, B_BENCH, C_BENCH, disturbance=benchmark_disturbance())


@pytest.fixture(scope="session")
def bench_yref():
    return ReferenceSignal.from_expressions([YREF_BENCH])


@pytest.fixture(scope="session")
def bench_syn():
    return synthesize(load_config(bundled_config("benchmark")))


@pytest.fixture(scope="session")
def bench_spec():
    return benchmark_funnels()


@pytest.fixture(scope="session")
def bench_traj(bench_syn, bench_spec):
    from nmpfunnel import simulate_closed_loop
    return simulate_closed_loop(bench_syn.sys, bench_syn.red, bench_syn.gen, bench_spec, 10.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)

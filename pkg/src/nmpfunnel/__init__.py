"""Funnel tracking control for linear systems with unstable zero dynamics.

The package redefines the output of a square linear plant so that the
unstable part of its internal dynamics enters the output chain, builds a
bounded reference for the new output and drives it with a funnel
controller whose tracking error provably stays inside prescribed bounds.

Typical use::

    from nmpfunnel import bundled_config, load_config, synthesize, simulate_closed_loop

    cfg = load_config(bundled_config("benchmark"))
    syn = synthesize(cfg)
    traj = simulate_closed_loop(syn.sys, syn.red, syn.gen, cfg.build_funnels(syn.red.order), 10.0)
"""

from .bounds import (BoundTables, EpsilonProfile, build_tables, design_inequality_check, epsilon_profiles,
                     error_bound, error_bound_audit, improved_margin_audit, integrate_epsilon)
from .certificates import Certificate
from .cli import synthesize
from .config import RunConfig, bundled_config, dump_config, load_config, parse_config
from .errors import *  # noqa: F401,F403  (exception hierarchy)
from .funnel_sim import (CascadeState, ClosedLoop, Trajectory, cascade_from_error_jet, evaluate_cascade,
                         simulate_closed_loop, simulate_with_restarts)
from .funnels import FunnelFunction, FunnelSpec
from .lti import (DisturbanceModel, LtiSystem, NormalForm, byrnes_isidori, disturbance_matching,
                  relative_degree, simulate_open_loop)
from .redef import (A1Decomposition, Redefinition, SpectralSplit, build_redefinition, check_a2, check_a3,
                    find_a1_decomposition, search_decomposition, spectral_split, verify_new_relative_degree)
from .refgen import (Exosystem, ReferenceGenerator, ReferenceSignal, boundedness_audit, eta2_ref0_quadrature,
                     eta2_ref0_sylvester, generate_reference, recompute_generator_state)

__version__ = "0.1.0"

"""Command line driver: synthesis, closed-loop simulation and bounds.

Usage::

    nmpfunnel {synthesize,simulate,bounds,all} --config run.yaml [--out DIR]
              [--tol-rel X] [--tol-abs X] [--restart-period T]

``bounds`` evaluates the a-priori envelope from the initial state without
simulating; ``all`` also simulates and audits the trajectory against it.
Exit status: 0 when every required certificate passes, 2 for configuration
errors, 3 for violated assumptions, 4 for numerical failures.  The log
level is read from ``NMPFUNNEL_LOG_LEVEL``.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds import (build_tables, design_inequality_check, epsilon_profiles, error_bound, error_bound_audit,
                     improved_margin_audit)
from .certificates import Certificate, jsonable
from .config import load_config
from .errors import (A3Violation, AssumptionError, ConfigError, DisturbanceMatchingError, NmpFunnelError,
                     NumericalFailure)
from .funnel_sim import ClosedLoop, simulate_closed_loop, simulate_with_restarts
from .lti import byrnes_isidori, disturbance_matching, normal_form_residual, relative_degree
from .redef import (build_redefinition, check_a2, check_a3, find_a1_decomposition, require_a2, spectral_split,
                    verify_new_relative_degree)
from .refgen import ReferenceGenerator, boundedness_audit, eta2_ref0_quadrature, eta2_ref0_sylvester

__all__ = ["main", "run", "synthesize", "emit_plot_data", "write_csv", "EXIT_CODES"]

log = logging.getLogger("nmpfunnel")

EXIT_CODES = {"ok": 0, "config": 2, "assumption": 3, "numerical": 4}
COMMANDS = ("synthesize", "simulate", "bounds", "all")
# certificates whose failure means a plant assumption does not hold
ASSUMPTION_CERTS = {"relative_degree", "disturbance_matching", "A1", "A2", "A3"}


@dataclass
class Synthesis:
    """Everything computed before the closed loop runs."""

    sys: object
    rel: object
    nf: object
    dec: object
    split: object
    red: object
    y_ref: object
    exo: object
    gen: object
    certificates: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def _fail_on(cert, exc_type, assumption):
    if not cert.passed:
        raise exc_type(cert.message or f"{cert.name} failed", assumption=assumption,
                       diagnostics=[cert.residuals])


def synthesize(cfg):
    """Relative degree, normal form, assumptions, redefinition and reference generator."""
    syn = cfg.data["synthesis"]
    horizon = cfg.data["simulation"]["horizon"]
    sys_ = cfg.build_system()
    y_ref, exo = cfg.build_reference()
    if y_ref.m != sys_.m:
        raise ConfigError(f"reference has {y_ref.m} components, the plant has {sys_.m} outputs",
                          cfg.line("reference"))
    certs = {}
    rel = relative_degree(sys_, tol_zero=syn["tol_zero"], tol_inv=syn["tol_inv"])
    certs["relative_degree"] = rel.certificate()
    if syn["relative_degree"] is not None and syn["relative_degree"] != rel.r:
        raise AssumptionError(f"configured relative degree {syn['relative_degree']} differs from the "
                              f"computed value {rel.r}", assumption="relative_degree")
    r = rel.r
    dm = disturbance_matching(sys_, r, horizon=horizon, tol_zero=syn["tol_zero"])
    certs["disturbance_matching"] = dm
    _fail_on(dm, DisturbanceMatchingError, "disturbance_matching")

    nf = byrnes_isidori(sys_, r)
    ra, rb = normal_form_residual(sys_, nf)
    options = {k: syn[k] for k in ("tol_axis", "max_ell") if syn[k] is not None}
    dec = find_a1_decomposition(nf, disturbance=sys_.disturbance, horizon=horizon, tol_zero=syn["tol_zero"],
                                tol_inv=syn["tol_inv"], **options)
    certs["A1"] = dec.certificate()
    split = spectral_split(dec, tol_axis=syn["tol_axis"])
    a2 = check_a2(split, y_ref, horizon=horizon)
    a2.name = "A2"
    certs["A2"] = a2
    require_a2(a2)
    a3 = check_a3(nf, dec, sys_.disturbance, horizon=horizon, tol_zero=syn["tol_zero"])
    a3.name = "A3"
    certs["A3"] = a3
    _fail_on(a3, A3Violation, "A3")

    red = build_redefinition(nf, dec)
    certs["new_relative_degree"] = verify_new_relative_degree(red, nf, sys_)
    eta0 = eta2_ref0_quadrature(split, y_ref)
    summary = {}
    if exo is not None and split.k2:
        eta_syl = eta2_ref0_sylvester(split, exo)
        gap = float(np.linalg.norm(eta_syl - eta0))
        certs["eta2_ref0_paths"] = Certificate(
            "eta2_ref0_paths", gap <= 1e-6 * max(1.0, float(np.linalg.norm(eta0))),
            {"difference": gap, "sylvester": eta_syl, "quadrature": eta0})
    gen = ReferenceGenerator(red, split, y_ref, eta0)
    certs["reference_boundedness"] = boundedness_audit(gen, horizon)
    summary.update({
        "r": r, "m": sys_.m, "n": sys_.n, "gamma": rel.gamma, "ell": red.ell, "levels": red.order,
        "normal_form": {"R": nf.r_coeffs, "S": nf.s, "P": nf.p, "Q": nf.q, "U": nf.u_transform,
                        "residual_A": ra, "residual_B": rb},
        "decomposition": {"q_tilde": dec.q_tilde, "p_tilde": dec.p_tilde, "k_dim": dec.k_dim,
                          "krylov_cond": dec.krylov_cond},
        "split": {"k1": split.k1, "k2": split.k2, "k3": split.k3},
        "K": red.k_row, "alphas": list(red.alphas), "F": red.f_coeffs, "measurement_map": red.measurement_map,
        "eta2_ref0": eta0,
    })
    return Synthesis(sys_, rel, nf, dec, split, red, y_ref, exo, gen, certs, summary)


# ---------------------------------------------------------------------------
# output files


def _fmt(value):
    return format(float(value), ".17g")


def write_csv(path, header, columns):
    """Write equally long columns with 17 significant digits."""
    rows = np.column_stack([np.asarray(c, dtype=float).reshape(len(columns[0]), -1) for c in columns])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _names(prefix, count):
    return [f"{prefix}{k}" for k in range(count)]


def write_trajectory(traj, out_dir):
    """Full trajectory export, one row per report time."""
    n = traj.x.shape[1]
    m = traj.y.shape[1]
    levels = traj.gains.shape[1]
    header = (["t"] + _names("x", n) + _names("y", m) + _names("y_ref", m) + _names("e", m) + _names("y_new", m)
              + _names("yhat_ref", m) + [f"e{i}_{c}" for i in range(levels) for c in range(m)]
              + _names("k", levels) + _names("u", m) + _names("psi", levels))
    cols = [traj.t, traj.x, traj.y, traj.y_ref, traj.e, traj.y_new, traj.yhat_ref,
            traj.errors.reshape(traj.t.size, -1), traj.gains, traj.u, traj.psi]
    return write_csv(Path(out_dir) / "trajectory.csv", header, cols)


def emit_plot_data(traj, tables, out_dir):
    """Output-versus-reference (with the envelope), states, input and funnel levels."""
    if traj is None or traj.t.size == 0:
        raise ValueError("no trajectory to export; run the simulate or all command")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = traj.y.shape[1]
    files = {}
    e_norm = np.linalg.norm(traj.e, axis=1)
    if tables is not None and tables.psi_bound is not None:
        psi = tables.psi_bound
        if psi.shape != traj.t.shape:
            raise ValueError("bound grid does not match the trajectory grid")
        header = (["t"] + _names("y", m) + _names("y_ref", m) + _names("y_ref_minus_Psi", m)
                  + _names("y_ref_plus_Psi", m) + ["e_norm", "Psi"])
        cols = [traj.t, traj.y, traj.y_ref, traj.y_ref - psi[:, None], traj.y_ref + psi[:, None], e_norm, psi]
    else:
        header = ["t"] + _names("y", m) + _names("y_ref", m) + ["e_norm"]
        cols = [traj.t, traj.y, traj.y_ref, e_norm]
    files["output"] = write_csv(out / "output.csv", header, cols)
    n = traj.x.shape[1]
    files["states"] = write_csv(out / "states.csv", ["t"] + _names("x", n) + _names("eta_ref", traj.eta.shape[1]),
                                [traj.t, traj.x, traj.eta])
    files["input"] = write_csv(out / "input.csv", ["t"] + _names("u", m), [traj.t, traj.u])
    levels = traj.gains.shape[1]
    files["funnels"] = write_csv(out / "funnels.csv", ["t"] + _names("psi", levels) + _names("e_norm", levels),
                                 [traj.t, traj.psi, traj.error_norms])
    return files


def write_bounds(tables, profiles, out_dir):
    out = Path(out_dir)
    header = ["t"] + [f"eps{p.index}" for p in profiles] + [f"Khat{i}" for i in sorted(tables.hat_k) if i >= 0]
    cols = [tables.t] + [p.eps for p in profiles] + [tables.hat_k[i] for i in sorted(tables.hat_k) if i >= 0]
    if tables.psi_bound is not None:
        header.append("Psi")
        cols.append(tables.psi_bound)
    return write_csv(out / "bounds.csv", header, cols)


# ---------------------------------------------------------------------------
# pipeline


class _Report:
    def __init__(self, cfg_path, command):
        self.data = {"config": str(cfg_path), "command": command, "status": "running", "exit_code": None,
                     "certificates": {}, "synthesis": {}, "simulation": {}, "bounds": {}, "timing": {},
                     "files": {}}
        self._clock = time.perf_counter()

    def stage(self, name):
        now = time.perf_counter()
        self.data["timing"][name] = now - self._clock
        self._clock = now

    def add(self, certs):
        for key, cert in certs.items():
            self.data["certificates"][key] = cert.to_dict()

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "run_report.json"
        path.write_text(json.dumps(jsonable(self.data), indent=2))
        return path


def _initial_error_norms(syn, spec):
    loop = ClosedLoop(syn.sys, syn.red, syn.gen, spec)
    cs = loop.cascade(0.0, loop.initial_state(), check=False)
    return [float(np.linalg.norm(e)) for e in cs.errors]


def _exit_for(certs):
    failed = [k for k, c in certs.items() if not c.passed]
    if not failed:
        return EXIT_CODES["ok"], failed
    if any(k in ASSUMPTION_CERTS for k in failed):
        return EXIT_CODES["assumption"], failed
    return EXIT_CODES["numerical"], failed


def run(config_path, command="all", out=None, tol_rel=None, tol_abs=None, restart_period=None):
    """Execute ``command`` for the configuration at ``config_path``; returns the exit status."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    report = _Report(config_path, command)
    out_dir = Path(out) if out is not None else None
    try:
        cfg = load_config(config_path)
        out_dir = out_dir or Path(cfg.data["output"]["dir"])
        sim = cfg.data["simulation"]
        if tol_rel is not None:
            sim["rtol"] = float(tol_rel)
        if tol_abs is not None:
            sim["atol"] = float(tol_abs)
        if restart_period is not None:
            sim["restart_period"] = float(restart_period)
        report.data["name"] = cfg.data["name"]
        report.stage("config")

        syn = synthesize(cfg)
        report.add(syn.certificates)
        report.data["synthesis"] = syn.summary
        report.stage("synthesis")
        log.info("synthesis: r=%d, ell=%d, levels=%d", syn.rel.r, syn.red.ell, syn.red.order)

        traj = tables = profiles = None
        if command in ("simulate", "bounds", "all"):
            spec = cfg.build_funnels(syn.red.order)
            fa = spec.audit(sim["horizon"])
            report.add({"funnel_class": fa})

        if command in ("simulate", "all"):
            kwargs = dict(n_report=sim["n_report"], rtol=sim["rtol"], atol=sim["atol"],
                          guard_margin=sim["guard_margin"], method=sim["method"])
            if sim["restart_period"]:
                traj = simulate_with_restarts(syn.sys, syn.red, syn.gen, spec, sim["horizon"], sim["restart_period"],
                                              perturbation=sim["perturbation"], **kwargs)
            else:
                traj = simulate_closed_loop(syn.sys, syn.red, syn.gen, spec, sim["horizon"], **kwargs)
            fc = traj.funnel_certificate()
            report.add({"funnel_invariant": fc})
            report.data["simulation"] = {"stats": traj.stats, "corrections": traj.corrections,
                                         "sup_gain": traj.gains.max(axis=0), "sup_u": fc.residuals["sup_u"],
                                         "sup_x": fc.residuals["sup_x"], "eps_observed": traj.eps_observed,
                                         "sup_error_norm": float(np.max(np.linalg.norm(traj.e, axis=1)))}
            out_dir.mkdir(parents=True, exist_ok=True)
            report.data["files"]["trajectory"] = str(write_trajectory(traj, out_dir))
            report.stage("simulation")

        if command in ("bounds", "all"):
            grid = traj.t if traj is not None else np.linspace(0.0, sim["horizon"], sim["n_report"])
            e0 = [float(v) for v in traj.error_norms[0]] if traj is not None else _initial_error_norms(syn, spec)
            profiles = epsilon_profiles(spec, e0, sim["horizon"], grid=grid, check=False)
            report.add({f"epsilon_envelope_{p.index}": p.certificate() for p in profiles})
            tables = build_tables(spec, profiles)
            psi = error_bound(syn.red, tables)
            report.data["bounds"] = {"alphas": tables.alphas, "sup_Psi": float(psi.max()),
                                     "final_Psi": float(psi[-1]),
                                     "eps_min": [p.eps_min for p in profiles],
                                     "eps_max": [p.eps_max for p in profiles],
                                     "lambda": [p.lambda_i for p in profiles],
                                     "kappa": [p.kappa_i for p in profiles]}
            target = cfg.build_target()
            if target is not None:
                report.add({"design_inequality": design_inequality_check(spec, tables, target)})
            if traj is not None:
                report.add({"improved_margin": improved_margin_audit(traj, profiles),
                            "error_bound": error_bound_audit(traj, psi)})
            out_dir.mkdir(parents=True, exist_ok=True)
            report.data["files"]["bounds"] = str(write_bounds(tables, profiles, out_dir))
            report.stage("bounds")

        if traj is not None:
            files = emit_plot_data(traj, tables, out_dir)
            report.data["files"].update({k: str(v) for k, v in files.items()})

        certs = {k: _CertView(v) for k, v in report.data["certificates"].items()}
        code, failed = _exit_for(certs)
        report.data["failed"] = failed
        report.data["status"] = "ok" if code == 0 else "failed"
    except ConfigError as exc:
        code = EXIT_CODES["config"]
        report.data["status"] = "config_error"
        report.data["error"] = {"type": type(exc).__name__, "message": str(exc), "line": exc.line}
        log.error("%s", exc)
    except AssumptionError as exc:
        code = EXIT_CODES["assumption"]
        report.data["status"] = "assumption_violated"
        report.data["error"] = {"type": type(exc).__name__, "message": str(exc), "assumption": exc.assumption,
                                "diagnostics": exc.diagnostics}
        log.error("assumption %s violated: %s", exc.assumption, exc)
    except NumericalFailure as exc:
        code = EXIT_CODES["numerical"]
        report.data["status"] = "numerical_failure"
        report.data["error"] = {"type": type(exc).__name__, "message": str(exc)}
        log.error("numerical failure: %s", exc)
    except NmpFunnelError as exc:
        code = EXIT_CODES["numerical"]
        report.data["status"] = "failed"
        report.data["error"] = {"type": type(exc).__name__, "message": str(exc)}
        log.error("%s", exc)
    report.data["exit_code"] = code
    if out_dir is not None:
        try:
            report.data["files"]["report"] = str(Path(out_dir) / "run_report.json")
            report.write(out_dir)
        except OSError as exc:
            log.error("cannot write report: %s", exc)
    return code


class _CertView:
    def __init__(self, data):
        self.passed = bool(data["passed"])


def _parser():
    p = argparse.ArgumentParser(prog="nmpfunnel", description="Funnel tracking control for non-minimum phase "
                                "linear systems: synthesis, simulation and a-priori error bounds.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    p.add_argument("--tol-rel", type=float, default=None, help="relative integration tolerance")
    p.add_argument("--tol-abs", type=float, default=None, help="absolute integration tolerance")
    p.add_argument("--restart-period", type=float, default=None,
                   help="re-anchor the reference generator every T time units")
    return p


def main(argv=None):
    level = os.environ.get("NMPFUNNEL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    code = run(args.config, args.command, args.out, args.tol_rel, args.tol_abs, args.restart_period)
    return code


if __name__ == "__main__":
    sys.exit(main())

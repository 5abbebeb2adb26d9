"""Run configuration: YAML document, schema validation and object builders.

A configuration has the blocks ``system``, ``signals``, ``reference``,
``funnels``, ``synthesis``, ``simulation``, ``bounds`` and ``output``.
Every error raised while reading one is a :class:`ConfigError` carrying the
line of the offending node when it can be located.
"""

import copy
import math
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .errors import ConfigError
from .expr import SignalExpression
from .funnels import FunnelFunction, FunnelSpec
from .lti import DisturbanceModel, LtiSystem
from .refgen import Exosystem, ReferenceSignal

__all__ = ["RunConfig", "load_config", "parse_config", "dump_config", "SCHEMA", "bundled_config"]

_NUMBER = {"type": "number"}
_SCALAR = {"type": ["number", "string"]}
_VECTOR = {"type": "array", "items": _NUMBER, "minItems": 1}
_MATRIX = {"type": "array", "items": _VECTOR, "minItems": 1}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}

_FUNNEL = {
    "type": "object",
    "required": ["family"],
    "oneOf": [
        {"properties": {"family": {"const": "exponential"}, "a": {"type": "number", "minimum": 0},
                        "b": {"type": "number", "minimum": 0}, "c": _POSITIVE},
         "required": ["a", "b", "c"], "additionalProperties": False},
        {"properties": {"family": {"const": "constant"}, "value": _POSITIVE},
         "required": ["value"], "additionalProperties": False},
        {"properties": {"family": {"const": "expression"}, "psi": _SCALAR,
                        "smoothness": {"type": "integer", "minimum": 1}},
         "required": ["psi"], "additionalProperties": False},
    ],
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["system", "reference", "funnels"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "system": {
            "type": "object",
            "required": ["A", "B", "C"],
            "additionalProperties": False,
            "properties": {
                "A": _MATRIX, "B": _MATRIX, "C": _MATRIX, "x0": _VECTOR,
                "disturbance": {"type": ["array", "null"], "items": _SCALAR},
            },
        },
        "signals": {"type": "object", "additionalProperties": _SCALAR},
        "reference": {
            "type": "object",
            "required": ["kind"],
            "oneOf": [
                {"properties": {"kind": {"const": "expression"},
                                "y_ref": {"type": "array", "items": _SCALAR, "minItems": 1}},
                 "required": ["y_ref"], "additionalProperties": False},
                {"properties": {"kind": {"const": "exosystem"}, "A_e": _MATRIX, "C_e": _MATRIX, "w0": _VECTOR},
                 "required": ["A_e", "C_e", "w0"], "additionalProperties": False},
                {"properties": {"kind": {"const": "samples"}, "t": _VECTOR, "values": _MATRIX,
                                "degree": {"type": "integer", "minimum": 1, "maximum": 5}},
                 "required": ["t", "values"], "additionalProperties": False},
                {"properties": {"kind": {"const": "zero"}}, "additionalProperties": False},
            ],
        },
        "funnels": {"type": "array", "items": _FUNNEL, "minItems": 1},
        "synthesis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "relative_degree": {"type": ["integer", "null"], "minimum": 1},
                "tol_zero": _POSITIVE, "tol_inv": _POSITIVE,
                "tol_axis": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "max_ell": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "horizon": _POSITIVE, "rtol": _POSITIVE, "atol": _POSITIVE,
                "n_report": {"type": "integer", "minimum": 2},
                "method": {"enum": ["radau", "dopri5"]},
                "guard_margin": {"type": "number", "minimum": 0},
                "restart_period": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "perturbation": {"type": "number", "minimum": 0},
            },
        },
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"target": {"oneOf": [{"type": "null"}, _FUNNEL]}},
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}

DEFAULTS = {
    "name": "run",
    "signals": {},
    "synthesis": {"relative_degree": None, "tol_zero": 1e-9, "tol_inv": 1e-10, "tol_axis": None,
                  "max_ell": None},
    "simulation": {"horizon": 10.0, "rtol": 1e-8, "atol": 1e-7, "n_report": 2001, "method": "radau",
                   "guard_margin": 1e-10, "restart_period": None, "perturbation": 0.0},
    "bounds": {"target": None},
    "output": {"dir": "out"},
}

DATA_DIR = Path(__file__).with_name("data")


def bundled_config(name):
    """Path of a configuration shipped with the package (``benchmark``, ``no_split``, ...)."""
    path = DATA_DIR / f"{name}.yaml"
    if not path.exists():
        raise ConfigError(f"no bundled configuration named {name!r}")
    return path


# ---------------------------------------------------------------------------
# line lookup


def _node_at(node, path):
    for key in path:
        if isinstance(node, yaml.MappingNode):
            match = [v for k, v in node.value if k.value == key]
            if not match:
                return node
            node = match[0]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            return node
    return node


def _line(root, path):
    if root is None:
        return None
    return _node_at(root, list(path)).start_mark.line + 1


# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Validated configuration with defaults filled in."""

    data: dict
    source: str = None
    _root: object = None

    def line(self, *path):
        return _line(self._root, path)

    def to_dict(self):
        return copy.deepcopy(self.data)

    # builders -----------------------------------------------------------

    def signal_names(self):
        names = {}
        for key, src in self.data["signals"].items():
            try:
                names[key] = SignalExpression.parse(src, names).expr
            except ConfigError as exc:
                raise ConfigError(f"signal {key!r}: {exc.message}", self.line("signals", key)) from None
        return names

    def build_system(self):
        sysd = self.data["system"]
        try:
            a = np.array(sysd["A"], dtype=float)
            b = np.array(sysd["B"], dtype=float)
            c = np.array(sysd["C"], dtype=float)
        except ValueError:
            raise ConfigError("system matrices must be rectangular", self.line("system")) from None
        n = a.shape[0]
        x0 = np.array(sysd.get("x0") or [0.0] * n, dtype=float)
        disturbance = self._disturbance(sysd.get("disturbance"), n)
        try:
            return LtiSystem(a, b, c, disturbance=disturbance, x0=x0)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"inconsistent system: {exc}", self.line("system")) from None

    def _disturbance(self, entries, n):
        if entries is None or all(isinstance(v, (int, float)) and v == 0 for v in entries):
            return DisturbanceModel.zero(n)
        if len(entries) != n:
            raise ConfigError(f"disturbance has {len(entries)} entries, the state has {n}",
                              self.line("system", "disturbance"))
        names = self.signal_names()
        exprs = []
        for k, src in enumerate(entries):
            try:
                exprs.append(SignalExpression.parse(src, names))
            except ConfigError as exc:
                raise ConfigError(exc.message, self.line("system", "disturbance", k)) from None
        funcs = [e.scalar_function(0) for e in exprs]
        bps = tuple(sorted({b for e in exprs for b in e.breakpoints}))

        def evaluator(t):
            return np.array([f(t) for f in funcs], dtype=float)

        return DisturbanceModel(n, evaluator, None, bps)

    def build_reference(self, max_order=8):
        """Reference signal and, for exosystem references, the exosystem."""
        ref = self.data["reference"]
        kind = ref["kind"]
        try:
            if kind == "expression":
                return ReferenceSignal.from_expressions(ref["y_ref"], self.signal_names(), max_order), None
            if kind == "exosystem":
                exo = Exosystem(np.array(ref["A_e"], float), np.array(ref["C_e"], float), np.array(ref["w0"], float))
                return ReferenceSignal.from_exosystem(exo), exo
            if kind == "samples":
                return ReferenceSignal.from_samples(ref["t"], ref["values"], ref.get("degree", 5)), None
            m = len(self.data["system"]["C"])
            return ReferenceSignal.zero(m), None
        except ConfigError as exc:
            raise ConfigError(exc.message, exc.line or self.line("reference")) from None
        except ValueError as exc:
            raise ConfigError(f"invalid reference: {exc}", self.line("reference")) from None

    def build_funnel(self, entry, path):
        fam = entry["family"]
        try:
            if fam == "exponential":
                return FunnelFunction.exponential(entry["a"], entry["b"], entry["c"])
            if fam == "constant":
                return FunnelFunction.constant(entry["value"])
            return FunnelFunction.from_expression(entry["psi"], self.signal_names(), entry.get("smoothness", 8))
        except ConfigError as exc:
            raise ConfigError(exc.message, self.line(*path)) from None

    def build_funnels(self, levels=None):
        """Funnel specification; ``levels`` is the expected count ``r + ell``."""
        entries = self.data["funnels"]
        if levels is not None and len(entries) != levels:
            raise ConfigError(f"the cascade has {levels} levels but {len(entries)} funnels are configured",
                              self.line("funnels"))
        phis = [self.build_funnel(e, ("funnels", k)) for k, e in enumerate(entries)]
        try:
            return FunnelSpec(phis)
        except ConfigError as exc:
            raise ConfigError(exc.message, self.line("funnels")) from None

    def build_target(self):
        target = self.data["bounds"]["target"]
        return None if target is None else self.build_funnel(target, ("bounds", "target"))


def _merge_defaults(data):
    out = copy.deepcopy(data)
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            block = dict(default)
            block.update(out.get(key) or {})
            out[key] = block
        else:
            out.setdefault(key, default)
    sysd = out["system"]
    sysd.setdefault("x0", [0.0] * len(sysd["A"]))
    sysd.setdefault("disturbance", None)
    return out


def _check_finite(data, root):
    def walk(obj, path):
        if isinstance(obj, float) and not math.isfinite(obj):
            raise ConfigError(f"non-finite number at {'/'.join(map(str, path))}", _line(root, path))
        if isinstance(obj, dict):
            for k, v in obj.items():
                walk(v, path + [k])
        elif isinstance(obj, list):
            for k, v in enumerate(obj):
                walk(v, path + [k])

    walk(data, [])


def parse_config(text, source=None):
    """Parse YAML text into a :class:`RunConfig`."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigError(f"malformed YAML: {exc.problem}", line) from None
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping", 1)
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        path = list(err.absolute_path)
        where = "/".join(map(str, path)) or "<root>"
        raise ConfigError(f"{where}: {err.message}", _line(root, path))
    _check_finite(data, root)
    return RunConfig(_merge_defaults(data), source, root)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg):
    """YAML text that parses back to ``cfg.to_dict()``."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

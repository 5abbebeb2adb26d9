"""Pass/fail records produced by the structural and numerical checks."""

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Certificate", "jsonable"]


def jsonable(value):
    """Convert numpy containers and scalars into plain JSON types."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(value, complex):
        return {"re": value.real, "im": value.imag}
    return value


@dataclass
class Certificate:
    """Outcome of a single check.

    Attributes
    ----------
    name : str
        Short identifier, e.g. ``"A2"``.
    passed : bool
    residuals : dict
        Named numbers that justify the verdict (maxima, thresholds, ...).
    message : str
    details : dict
        Free-form diagnostics (search logs, per-level data).
    """

    name: str
    passed: bool
    residuals: dict = field(default_factory=dict)
    message: str = ""
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return bool(self.passed)

    def to_dict(self):
        return jsonable({
            "name": self.name,
            "passed": self.passed,
            "residuals": self.residuals,
            "message": self.message,
            "details": self.details,
        })

"""Small arithmetic grammar for time signals.

Expressions are ordinary Python arithmetic in the variable ``t`` with a
whitelist of functions::

    0.5*sin(5*t) + cos(8*t)
    piecewise((1 - cos(t), t <= 2*pi), (0, True))

The source is parsed with :mod:`ast`, every node is checked against the
whitelist and then rebuilt as a sympy expression, which gives exact
derivatives of any order.
"""

import ast
import math
from functools import lru_cache

import numpy as np
import sympy as sp

from .errors import ConfigError

__all__ = ["T", "parse_expression", "SignalExpression"]

T = sp.Symbol("t", real=True)

_FUNCTIONS = {
    "sin": sp.sin,
    "cos": sp.cos,
    "tan": sp.tan,
    "exp": sp.exp,
    "log": sp.log,
    "sqrt": sp.sqrt,
    "abs": sp.Abs,
    "tanh": sp.tanh,
    "sinh": sp.sinh,
    "cosh": sp.cosh,
    "atan": sp.atan,
}
_CONSTANTS = {"pi": sp.pi, "e": sp.E, "t": T}
_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a ** b,
}
_COMPARE = {
    ast.Lt: sp.Lt,
    ast.LtE: sp.Le,
    ast.Gt: sp.Gt,
    ast.GtE: sp.Ge,
}


def parse_expression(source, names=None):
    """Parse ``source`` into a sympy expression in ``t``.

    ``names`` maps additional identifiers (named signals) to sympy
    expressions.  Raises ``ConfigError`` on anything outside the grammar.
    """
    names = names or {}
    if isinstance(source, (int, float)):
        return sp.Float(source) if isinstance(source, float) else sp.Integer(source)
    if not isinstance(source, str):
        raise ConfigError(f"expression must be a string or number, got {type(source).__name__}")
    try:
        tree = ast.parse(source.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {source!r}: {exc.msg}") from None
    return _build(tree.body, names, source)


def _build(node, names, source):
    def fail(msg):
        raise ConfigError(f"{msg} in expression {source!r}")

    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool):
            return sp.true if node.value else sp.false
        if isinstance(node.value, (int, float)):
            return sp.nsimplify(node.value) if isinstance(node.value, int) else sp.Float(node.value)
        fail(f"unsupported literal {node.value!r}")
    if isinstance(node, ast.Name):
        if node.id in names:
            return names[node.id]
        if node.id in _CONSTANTS:
            return _CONSTANTS[node.id]
        fail(f"undefined name {node.id!r}")
    if isinstance(node, ast.UnaryOp):
        operand = _build(node.operand, names, source)
        if isinstance(node.op, ast.USub):
            return -operand
        if isinstance(node.op, ast.UAdd):
            return operand
        if isinstance(node.op, ast.Not):
            return sp.Not(operand)
        fail("unsupported unary operator")
    if isinstance(node, ast.BinOp):
        op = _BINOPS.get(type(node.op))
        if op is None:
            fail("unsupported operator")
        return op(_build(node.left, names, source), _build(node.right, names, source))
    if isinstance(node, ast.BoolOp):
        parts = [_build(v, names, source) for v in node.values]
        return sp.And(*parts) if isinstance(node.op, ast.And) else sp.Or(*parts)
    if isinstance(node, ast.Compare):
        left = _build(node.left, names, source)
        terms = []
        for op, right_node in zip(node.ops, node.comparators):
            rel = _COMPARE.get(type(op))
            if rel is None:
                fail("unsupported comparison")
            right = _build(right_node, names, source)
            terms.append(rel(left, right))
            left = right
        return sp.And(*terms) if len(terms) > 1 else terms[0]
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.keywords:
            fail("only plain calls of whitelisted functions are allowed")
        fname = node.func.id
        if fname == "piecewise":
            pieces = []
            for arg in node.args:
                if not isinstance(arg, ast.Tuple) or len(arg.elts) != 2:
                    fail("piecewise expects (value, condition) pairs")
                pieces.append((_build(arg.elts[0], names, source), _build(arg.elts[1], names, source)))
            if not pieces:
                fail("piecewise needs at least one branch")
            return sp.Piecewise(*pieces)
        func = _FUNCTIONS.get(fname)
        if func is None:
            fail(f"unknown function {fname!r}")
        if len(node.args) != 1:
            fail(f"{fname} takes one argument")
        return func(_build(node.args[0], names, source))
    fail(f"unsupported syntax {type(node).__name__}")


def _breakpoints(expr):
    points = set()
    for rel in expr.atoms(sp.core.relational.Relational):
        try:
            sol = sp.solve(sp.Eq(rel.lhs, rel.rhs), T)
        except NotImplementedError:
            continue
        for s in sol:
            if s.is_real and float(s) > 0:
                points.add(s)
    return tuple(sorted(points, key=float))


class SignalExpression:
    """A scalar function of time with exact derivatives.

    Compiled evaluators are cached per derivative order; ``__call__`` accepts
    a float or an array of times.
    """

    def __init__(self, expr, source=None):
        self.expr = sp.sympify(expr)
        self.source = source if source is not None else str(expr)
        free = self.expr.free_symbols - {T}
        if free:
            raise ConfigError(f"expression {self.source!r} has unbound symbols {sorted(map(str, free))}")
        self.exact_breakpoints = _breakpoints(self.expr)
        self.breakpoints = tuple(float(b) for b in self.exact_breakpoints)
        self._scalar = {}
        self._vector = {}

    @classmethod
    def parse(cls, source, names=None):
        return cls(parse_expression(source, names), source=str(source))

    @lru_cache(maxsize=None)
    def _derivative(self, order):
        return sp.diff(self.expr, T, order) if order else self.expr

    def scalar_function(self, order=0):
        if order not in self._scalar:
            d = self._derivative(order)
            self._scalar[order] = sp.lambdify(T, d, modules=[{"Abs": abs}, "math"])
        return self._scalar[order]

    def vector_function(self, order=0):
        if order not in self._vector:
            self._vector[order] = sp.lambdify(T, self._derivative(order), modules="numpy")
        return self._vector[order]

    def __call__(self, t, order=0):
        if np.ndim(t) == 0:
            return float(self.scalar_function(order)(float(t)))
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(self.vector_function(order)(t), dtype=float), t.shape).copy()

    def is_constant(self):
        return T not in self.expr.free_symbols

    def limit_at_infinity(self):
        try:
            lim = sp.limit(self.expr, T, sp.oo)
        except Exception:
            return None
        if lim.is_real and lim.is_finite:
            return float(lim)
        return None

    def __repr__(self):
        return f"SignalExpression({self.source!r})"


def constant_value(source):
    """Evaluate a constant expression such as ``"2*pi"`` to a float."""
    expr = parse_expression(source)
    if T in expr.free_symbols:
        raise ConfigError(f"expected a constant, got {source!r}")
    value = float(expr)
    if not math.isfinite(value):
        raise ConfigError(f"constant {source!r} is not finite")
    return value

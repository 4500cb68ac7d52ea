"""Expression graphs with exact forward-mode differentiation.

Scalar fields are stored as hash-consed expression DAGs over the state
variables.  Directional derivatives are produced by pushing tangent
expressions through the graph (dual-number arithmetic where both parts are
expressions), so the result is again an expression and can be differentiated
further.  Only constant folding and a handful of identities are applied.

Evaluation compiles a set of root expressions into one topologically ordered
program, so shared sub-expressions are computed once per call.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Expr",
    "const",
    "var",
    "sin",
    "cos",
    "tan",
    "atan",
    "jvp",
    "Program",
    "ScalarField",
    "ControlAffineSystem",
    "lie_derivative",
    "expand_level",
    "jacobian_fields",
]

_UNARY = ("neg", "sin", "cos", "tan", "atan")
_BINARY = ("add", "mul", "div")

_table: dict[tuple, "Expr"] = {}
_lock = threading.Lock()
_counter = 0


class Expr:
    """Immutable node of an expression DAG.

    Nodes are interned: building the same (op, args) twice returns the same
    object, so identity comparison is structural equality.
    """

    __slots__ = ("op", "args", "value", "uid", "__weakref__")

    def __new__(cls, op: str, args: tuple = (), value: float | int | None = None):
        key = (op, tuple(a.uid for a in args), value)
        with _lock:
            node = _table.get(key)
            if node is not None:
                return node
            global _counter
            node = object.__new__(cls)
            node.op = op
            node.args = args
            node.value = value
            node.uid = _counter
            _counter += 1
            _table[key] = node
        return node

    # construction helpers with folding -------------------------------
    def __add__(self, other):
        return _add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_lift(other)))

    def __rsub__(self, other):
        return _add(_lift(other), _neg(self))

    def __mul__(self, other):
        return _mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _lift(other))

    def __rtruediv__(self, other):
        return _div(_lift(other), self)

    def __neg__(self):
        return _neg(self)

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    def __repr__(self) -> str:
        if self.op == "const":
            return repr(self.value)
        if self.op == "var":
            return f"x[{self.value}]"
        if self.op in _UNARY:
            return f"{self.op}({self.args[0]!r})"
        sym = {"add": "+", "mul": "*", "div": "/"}[self.op]
        return f"({self.args[0]!r} {sym} {self.args[1]!r})"

    def __reduce__(self):
        raise TypeError("Expr nodes are interned and cannot be pickled")


def const(value: float) -> Expr:
    value = float(value)
    if value == 0.0:
        value = 0.0  # fold -0.0
    return Expr("const", (), value)


def var(index: int) -> Expr:
    return Expr("var", (), int(index))


ZERO = const(0.0)
ONE = const(1.0)


def _lift(obj) -> Expr:
    if isinstance(obj, Expr):
        return obj
    return const(obj)


def _sorted(a: Expr, b: Expr) -> tuple[Expr, Expr]:
    # constants first, then creation order; improves sharing of commutative ops
    if a.is_const and not b.is_const:
        return a, b
    if b.is_const and not a.is_const:
        return b, a
    return (a, b) if a.uid <= b.uid else (b, a)


def _add(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.value + b.value)
    if a is ZERO:
        return b
    if b is ZERO:
        return a
    a, b = _sorted(a, b)
    return Expr("add", (a, b))


def _mul(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.value * b.value)
    if a is ZERO or b is ZERO:
        return ZERO
    if a is ONE:
        return b
    if b is ONE:
        return a
    a, b = _sorted(a, b)
    if a.is_const and a.value == -1.0:
        return _neg(b)
    return Expr("mul", (a, b))


def _div(a: Expr, b: Expr) -> Expr:
    if b is ZERO:
        raise ZeroDivisionError("division by the zero expression")
    if a is ZERO:
        return ZERO
    if b.is_const:
        if a.is_const:
            return const(a.value / b.value)
        if b.value == 1.0:
            return a
        return _mul(const(1.0 / b.value), a)
    return Expr("div", (a, b))


def _neg(a: Expr) -> Expr:
    if a.is_const:
        return const(-a.value)
    if a.op == "neg":
        return a.args[0]
    return Expr("neg", (a,))


def sin(a) -> Expr:
    a = _lift(a)
    return const(math.sin(a.value)) if a.is_const else Expr("sin", (a,))


def cos(a) -> Expr:
    a = _lift(a)
    return const(math.cos(a.value)) if a.is_const else Expr("cos", (a,))


def tan(a) -> Expr:
    a = _lift(a)
    if a.is_const:
        return const(math.tan(a.value))
    if a.op == "atan":
        return a.args[0]
    return Expr("tan", (a,))


def atan(a) -> Expr:
    a = _lift(a)
    return const(math.atan(a.value)) if a.is_const else Expr("atan", (a,))


def _topo(roots: Iterable[Expr]) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(r, False) for r in reversed(list(roots))]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.uid in seen:
            continue
        seen.add(node.uid)
        stack.append((node, True))
        for child in reversed(node.args):
            if child.uid not in seen:
                stack.append((child, False))
    return order


def jvp(expr: Expr, tangents: dict[int, Expr], memo: dict[int, Expr] | None = None) -> Expr:
    """Directional derivative of `expr` with variable tangents `tangents`.

    Variables missing from `tangents` have zero tangent.  `memo` may be shared
    between calls that use the same tangent map.
    """
    if memo is None:
        memo = {}
    for node in _topo([expr]):
        if node.uid in memo:
            continue
        op = node.op
        if op == "const":
            d = ZERO
        elif op == "var":
            d = tangents.get(node.value, ZERO)
        else:
            a = node.args[0]
            da = memo[a.uid]
            if op == "add":
                d = da + memo[node.args[1].uid]
            elif op == "mul":
                b = node.args[1]
                d = da * b + a * memo[b.uid]
            elif op == "div":
                b = node.args[1]
                db = memo[b.uid]
                d = da / b - node * db / b if db is not ZERO else da / b
            elif op == "neg":
                d = -da
            elif op == "sin":
                d = da * cos(a)
            elif op == "cos":
                d = -(da * sin(a))
            elif op == "tan":
                d = da * (1.0 + node * node)
            elif op == "atan":
                d = da / (1.0 + a * a)
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op!r}")
        memo[node.uid] = d
    return memo[expr.uid]


_NP_FUNCS = {"sin": np.sin, "cos": np.cos, "tan": np.tan, "atan": np.arctan}
_MATH_FUNCS = {"sin": math.sin, "cos": math.cos, "tan": math.tan, "atan": math.atan}


class Program:
    """A list of expressions compiled for repeated evaluation.

    ``Program(exprs)(X)`` with ``X`` of shape (n_points, n_x) returns an array
    of shape (n_points, len(exprs)); a 1-D ``X`` returns a 1-D result.
    """

    def __init__(self, exprs: Sequence[Expr]):
        self.exprs = list(exprs)
        order = _topo(self.exprs)
        slot = {node.uid: i for i, node in enumerate(order)}
        code = []
        for node in order:
            args = tuple(slot[a.uid] for a in node.args)
            code.append((node.op, args, node.value))
        self._code = code
        self._outputs = [slot[e.uid] for e in self.exprs]
        self.size = len(order)

    def _eval_point(self, x) -> list:
        vals: list = [0.0] * len(self._code)
        for i, (op, args, value) in enumerate(self._code):
            if op == "const":
                vals[i] = value
            elif op == "var":
                vals[i] = x[value]
            elif op == "add":
                vals[i] = vals[args[0]] + vals[args[1]]
            elif op == "mul":
                vals[i] = vals[args[0]] * vals[args[1]]
            elif op == "div":
                vals[i] = vals[args[0]] / vals[args[1]]
            elif op == "neg":
                vals[i] = -vals[args[0]]
            else:
                vals[i] = _MATH_FUNCS[op](vals[args[0]])
        return vals

    def _eval_batch(self, X: np.ndarray) -> list:
        n = X.shape[0]
        vals: list = [None] * len(self._code)
        for i, (op, args, value) in enumerate(self._code):
            if op == "const":
                vals[i] = value
            elif op == "var":
                vals[i] = X[:, value]
            elif op == "add":
                vals[i] = vals[args[0]] + vals[args[1]]
            elif op == "mul":
                vals[i] = vals[args[0]] * vals[args[1]]
            elif op == "div":
                vals[i] = vals[args[0]] / vals[args[1]]
            elif op == "neg":
                vals[i] = -vals[args[0]]
            else:
                vals[i] = _NP_FUNCS[op](vals[args[0]])
        out = np.empty((n, len(self._outputs)))
        for j, s in enumerate(self._outputs):
            out[:, j] = vals[s]
        return out

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            vals = self._eval_point([float(v) for v in X])
            return np.array([vals[s] for s in self._outputs], dtype=float)
        return self._eval_batch(X)


class ScalarField:
    """Scalar function of the state backed by an expression.

    Supports value evaluation and exact value-and-gradient evaluation; the
    gradient expressions are derived on first use.
    """

    __slots__ = ("expr", "n_x", "_grad", "_prog")

    def __init__(self, expr, n_x: int):
        self.expr = _lift(expr)
        self.n_x = int(n_x)
        self._grad: list[Expr] | None = None
        self._prog: Program | None = None

    @property
    def is_zero(self) -> bool:
        return self.expr is ZERO

    @property
    def is_constant(self) -> bool:
        return self.expr.is_const

    def gradient_exprs(self) -> list[Expr]:
        if self._grad is None:
            self._grad = [jvp(self.expr, {i: ONE}) for i in range(self.n_x)]
        return self._grad

    def __call__(self, x) -> np.ndarray | float:
        if self._prog is None:
            self._prog = Program([self.expr])
        out = self._prog(x)
        return float(out[0]) if out.ndim == 1 else out[:, 0]

    def value_and_grad(self, x):
        """Return (value, gradient) at a point or a batch of points."""
        prog = Program([self.expr, *self.gradient_exprs()])
        out = prog(x)
        if out.ndim == 1:
            return float(out[0]), out[1:]
        return out[:, 0], out[:, 1:]

    def __repr__(self) -> str:
        return f"ScalarField({self.expr!r})"


def _as_field(obj, n_x: int) -> ScalarField:
    return obj if isinstance(obj, ScalarField) else ScalarField(obj, n_x)


@dataclass(frozen=True)
class ControlAffineSystem:
    """dx/dt = f(x) + sum_j g_j(x) u_j,  y = h(x)."""

    drift: tuple[ScalarField, ...]
    control: tuple[tuple[ScalarField, ...], ...]  # control[j][i] = g_{i,j}
    output: tuple[ScalarField, ...]
    n_x: int

    @classmethod
    def from_exprs(cls, drift, control, output, n_x: int) -> "ControlAffineSystem":
        drift = tuple(_as_field(e, n_x) for e in drift)
        control = tuple(tuple(_as_field(e, n_x) for e in g) for g in control)
        output = tuple(_as_field(e, n_x) for e in output)
        if len(drift) != n_x or any(len(g) != n_x for g in control):
            raise ValueError("vector fields must have n_x components")
        return cls(drift, control, output, n_x)

    @property
    def m(self) -> int:
        return len(self.control)

    @property
    def n_y(self) -> int:
        return len(self.output)

    def vector_fields(self) -> list[tuple[ScalarField, ...]]:
        """[f, g_1, ..., g_m] in index order."""
        return [self.drift, *self.control]

    def rhs_exprs(self, u_exprs: Sequence[Expr]) -> list[Expr]:
        """Component expressions of f(x) + sum_j g_j(x) u_j for symbolic u."""
        out = []
        for i in range(self.n_x):
            e = self.drift[i].expr
            for j, g in enumerate(self.control):
                e = e + g[i].expr * u_exprs[j]
            out.append(e)
        return out


def lie_derivative(phi: ScalarField, field: Sequence[ScalarField]) -> ScalarField:
    """The scalar field x -> grad(phi)(x) . field(x)."""
    if len(field) != phi.n_x:
        raise ValueError(f"field has {len(field)} components, state has {phi.n_x}")
    tangents = {i: fi.expr for i, fi in enumerate(field) if fi.expr is not ZERO}
    return ScalarField(jvp(phi.expr, tangents), phi.n_x)


def expand_level(fields: Sequence[ScalarField], sys: ControlAffineSystem) -> list[ScalarField]:
    """Children of each field: derivative along f, then along g_1..g_m."""
    vfs = sys.vector_fields()
    out: list[ScalarField] = []
    memos = [dict() for _ in vfs]
    tangents = [{i: fi.expr for i, fi in enumerate(vf) if fi.expr is not ZERO} for vf in vfs]
    for phi in fields:
        for vf, tg, memo in zip(vfs, tangents, memos):
            out.append(ScalarField(jvp(phi.expr, tg, memo), sys.n_x))
    return out


def jacobian_fields(exprs: Sequence[Expr], n_vars: int) -> list[list[Expr]]:
    """Exact Jacobian expressions d exprs[i] / d var[j]."""
    rows = [[ZERO] * n_vars for _ in exprs]
    for j in range(n_vars):
        memo: dict[int, Expr] = {}
        for i, e in enumerate(exprs):
            rows[i][j] = jvp(e, {j: ONE}, memo)
    return rows

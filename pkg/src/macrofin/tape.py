"""Reverse-mode automatic differentiation over scalar computation graphs.

A :class:`Tape` is an append-only Wengert list of scalar operations.  Primal
values are computed eagerly while recording; the graph can then be re-executed
(``forward``) after changing leaf values, and differentiated (``backward``)
any number of times.  Branching operations (max/min/abs) resolve their branch
against the primals of the *current* execution, so a recorded graph stays
valid when leaf values move.

Two execution engines implement the same contract: a compiled Cython engine
(``macrofin._tape_c``) and a pure-Python fallback (``macrofin._tape_py``).
The compiled engine is selected at import when available; set the environment
variable ``MACROFIN_PURE_PY=1`` to force the fallback.

Besides the binary/unary opcodes, the tape supports two fused n-ary scalar
ops, ``dot`` (sum of pairwise products) and ``sum``.  They are semantically
sugar for mul/add chains but keep the node count and interpreter overhead of
wide affine layers manageable.
"""

from __future__ import annotations

import math
import os
from array import array
from typing import Callable, Iterable, Sequence

import numpy as np

# Opcode table. Engines hard-code the same integers; test_tape checks sync.
OP_INPUT = 0
OP_CONST = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_POW = 6
OP_EXP = 7
OP_LN = 8
OP_TANH = 9
OP_SIGMOID = 10
OP_MAX = 11
OP_MIN = 12
OP_ABS = 13
OP_SQRT = 14
OP_NEG = 15
OP_DOT = 16
OP_SUM = 17

OPCODES = {
    "input": OP_INPUT,
    "const": OP_CONST,
    "add": OP_ADD,
    "sub": OP_SUB,
    "mul": OP_MUL,
    "div": OP_DIV,
    "pow": OP_POW,
    "exp": OP_EXP,
    "ln": OP_LN,
    "tanh": OP_TANH,
    "sigmoid": OP_SIGMOID,
    "max": OP_MAX,
    "min": OP_MIN,
    "abs": OP_ABS,
    "sqrt": OP_SQRT,
    "neg": OP_NEG,
    "dot": OP_DOT,
    "sum": OP_SUM,
}

_UNARY = {OP_EXP, OP_LN, OP_TANH, OP_SIGMOID, OP_ABS, OP_SQRT, OP_NEG}
_BINARY = {OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW, OP_MAX, OP_MIN}


class DomainError(ValueError):
    """Invalid primal for an operation (div by zero, ln/sqrt of a negative)."""

    def __init__(self, message: str, node: int):
        super().__init__(f"{message} (node {node})")
        self.node = node


class NonFiniteError(FloatingPointError):
    """A re-executed forward or backward sweep produced a non-finite value."""

    def __init__(self, message: str, node: int):
        super().__init__(f"{message} (node {node})")
        self.node = node


def _load_engine():
    if os.environ.get("MACROFIN_PURE_PY", "") not in ("", "0"):
        from . import _tape_py as engine

        return engine, False
    try:
        from . import _tape_c as engine

        return engine, True
    except ImportError:
        from . import _tape_py as engine

        return engine, False


_DEFAULT_ENGINE, HAS_COMPILED_ENGINE = _load_engine()


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "i")

    def __init__(self, tape: "Tape", i: int):
        self.tape = tape
        self.i = i

    @property
    def value(self) -> float:
        return self.tape._primal[self.i]

    def __repr__(self):
        return f"Var({self.i}, value={self.value:.6g})"

    def _coerce(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.const(float(other))

    def __add__(self, other):
        return self.tape._binary(OP_ADD, self, self._coerce(other))

    def __radd__(self, other):
        return self._coerce(other).__add__(self)

    def __sub__(self, other):
        return self.tape._binary(OP_SUB, self, self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        return self.tape._binary(OP_MUL, self, self._coerce(other))

    def __rmul__(self, other):
        return self._coerce(other).__mul__(self)

    def __truediv__(self, other):
        return self.tape._binary(OP_DIV, self, self._coerce(other))

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __pow__(self, other):
        return self.tape._binary(OP_POW, self, self._coerce(other))

    def __rpow__(self, other):
        return self._coerce(other).__pow__(self)

    def __neg__(self):
        return self.tape._unary(OP_NEG, self)


class Tape:
    """Append-only scalar computation graph with adjoint accumulation.

    Recording is eager: every node's primal is computed as it is appended.
    ``forward()`` re-executes the whole graph (after leaf updates via
    ``set_values``); ``backward(out)`` accumulates adjoints of ``out`` with
    respect to every node.  Both sweeps visit nodes in a fixed order, so
    results are bit-deterministic.
    """

    def __init__(self, engine=None):
        self._engine = engine if engine is not None else _DEFAULT_ENGINE
        self._op = array("b")
        self._a = array("i")
        self._b = array("i")
        self._primal = array("d")
        self._args = array("i")
        self._adjoint: np.ndarray | None = None
        self._views_stale = True
        self._np: dict[str, np.ndarray] = {}

    # -- recording ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self._op)

    def _append(self, op: int, a: int, b: int, value: float) -> Var:
        if not self._views_stale:
            # drop numpy views so the underlying buffers can be resized
            self._np = {}
            self._views_stale = True
        self._op.append(op)
        self._a.append(a)
        self._b.append(b)
        self._primal.append(value)
        self._views_stale = True
        return Var(self, len(self._op) - 1)

    def input(self, value: float = 0.0) -> Var:
        """Differentiable leaf (network weight, trainable scalar)."""
        return self._append(OP_INPUT, -1, -1, float(value))

    def const(self, value: float) -> Var:
        """Non-differentiable data node (coordinates, masks, literals).

        Values may be updated in place between forward sweeps.
        """
        return self._append(OP_CONST, -1, -1, float(value))

    def _unary(self, op: int, x: Var) -> Var:
        px = self._primal[x.i]
        if op == OP_EXP:
            v = math.exp(px) if px < 709.0 else math.inf
        elif op == OP_LN:
            if px <= 0.0:
                raise DomainError(f"ln of non-positive value {px}", len(self._op))
            v = math.log(px)
        elif op == OP_TANH:
            v = math.tanh(px)
        elif op == OP_SIGMOID:
            v = 1.0 / (1.0 + math.exp(-px)) if px > -709.0 else 0.0
        elif op == OP_ABS:
            v = abs(px)
        elif op == OP_SQRT:
            if px < 0.0:
                raise DomainError(f"sqrt of negative value {px}", len(self._op))
            v = math.sqrt(px)
        elif op == OP_NEG:
            v = -px
        else:  # pragma: no cover
            raise ValueError(f"bad unary opcode {op}")
        return self._append(op, x.i, -1, v)

    def _binary(self, op: int, x: Var, y: Var) -> Var:
        px = self._primal[x.i]
        py = self._primal[y.i]
        if op == OP_ADD:
            v = px + py
        elif op == OP_SUB:
            v = px - py
        elif op == OP_MUL:
            v = px * py
        elif op == OP_DIV:
            if py == 0.0:
                raise DomainError("division by zero", len(self._op))
            v = px / py
        elif op == OP_POW:
            v = px**py
        elif op == OP_MAX:
            v = px if px >= py else py
        elif op == OP_MIN:
            v = px if px <= py else py
        else:  # pragma: no cover
            raise ValueError(f"bad binary opcode {op}")
        return self._append(op, x.i, y.i, v)

    def dot(self, xs: Sequence[Var], ys: Sequence[Var]) -> Var:
        """Fused sum of pairwise products: sum_k xs[k]*ys[k]."""
        if len(xs) != len(ys):
            raise ValueError("dot operands must have equal length")
        if not self._views_stale:
            self._np = {}
            self._views_stale = True
        p = self._primal
        v = 0.0
        ptr = len(self._args)
        for x, y in zip(xs, ys):
            self._args.append(x.i)
            self._args.append(y.i)
            v += p[x.i] * p[y.i]
        return self._append(OP_DOT, ptr, len(xs), v)

    def vsum(self, xs: Sequence[Var]) -> Var:
        """Fused sum of a list of nodes."""
        if not self._views_stale:
            self._np = {}
            self._views_stale = True
        p = self._primal
        v = 0.0
        ptr = len(self._args)
        for x in xs:
            self._args.append(x.i)
            v += p[x.i]
        return self._append(OP_SUM, ptr, len(xs), v)

    def record(self, opcode: str, operands: Sequence) -> Var:
        """Spec-level recording API working on opcode names.

        ``operands`` are Vars (or a single float for ``const``).
        """
        op = OPCODES[opcode]
        if op == OP_CONST:
            return self.const(float(operands[0]))
        if op == OP_INPUT:
            return self.input(float(operands[0]) if operands else 0.0)
        if op in _UNARY:
            (x,) = operands
            return self._unary(op, x)
        if op in _BINARY:
            x, y = operands
            return self._binary(op, x, y)
        if op == OP_DOT:
            xs, ys = operands
            return self.dot(xs, ys)
        if op == OP_SUM:
            return self.vsum(list(operands))
        raise ValueError(f"unknown opcode {opcode!r}")  # pragma: no cover

    # -- execution ---------------------------------------------------------

    def _views(self):
        if self._views_stale:
            self._np = {
                "op": np.frombuffer(self._op, dtype=np.int8),
                "a": np.frombuffer(self._a, dtype=np.int32),
                "b": np.frombuffer(self._b, dtype=np.int32),
                "primal": np.frombuffer(self._primal, dtype=np.float64),
                "args": np.frombuffer(self._args, dtype=np.int32)
                if len(self._args)
                else np.empty(0, dtype=np.int32),
            }
            n = len(self._op)
            if self._adjoint is None or self._adjoint.shape[0] < n:
                self._adjoint = np.zeros(n, dtype=np.float64)
            self._views_stale = False
        return self._np

    def forward(self) -> None:
        """Recompute every node primal from current leaf/const values.

        Raises :class:`NonFiniteError` on the first non-finite primal.
        """
        v = self._views()
        bad = self._engine.forward(
            v["op"], v["a"], v["b"], v["args"], v["primal"], len(self._op)
        )
        if bad >= 0:
            raise NonFiniteError("non-finite primal in forward sweep", bad)

    def backward(self, out: Var) -> None:
        """Accumulate adjoints of ``out`` w.r.t. every node (seed = 1)."""
        v = self._views()
        bad = self._engine.backward(
            v["op"], v["a"], v["b"], v["args"], v["primal"], self._adjoint, out.i
        )
        if bad >= 0:
            raise NonFiniteError("non-finite adjoint in backward sweep", bad)

    # -- access ------------------------------------------------------------

    def value(self, var: Var) -> float:
        return self._primal[var.i]

    def values(self, ids: np.ndarray) -> np.ndarray:
        return self._views()["primal"][ids]

    def set_value(self, var: Var, value: float) -> None:
        self._primal[var.i] = float(value)

    def set_values(self, ids: np.ndarray, values: np.ndarray) -> None:
        self._views()["primal"][ids] = values

    def adjoint(self, var: Var) -> float:
        if self._adjoint is None:
            raise RuntimeError("backward has not run")
        return float(self._adjoint[var.i])

    def adjoints(self, ids: np.ndarray) -> np.ndarray:
        if self._adjoint is None:
            raise RuntimeError("backward has not run")
        return self._adjoint[ids].copy()

    def gradient(self, out: Var, leaves: Iterable[Var]) -> np.ndarray:
        """Convenience: one backward sweep, then gather leaf adjoints."""
        self.backward(out)
        return np.array([self._adjoint[v.i] for v in leaves])


# -- float/Var generic math helpers -----------------------------------------
# Model formulas are written once against these and evaluate on plain floats
# (reference paths, tests) or on tape Vars (training graphs).


def _is_var(x) -> bool:
    return isinstance(x, Var)


def exp(x):
    return x.tape._unary(OP_EXP, x) if _is_var(x) else math.exp(x)


def log(x):
    return x.tape._unary(OP_LN, x) if _is_var(x) else math.log(x)


def tanh(x):
    return x.tape._unary(OP_TANH, x) if _is_var(x) else math.tanh(x)


def sigmoid(x):
    if _is_var(x):
        return x.tape._unary(OP_SIGMOID, x)
    return 1.0 / (1.0 + math.exp(-x))


def sqrt(x):
    return x.tape._unary(OP_SQRT, x) if _is_var(x) else math.sqrt(x)


def absolute(x):
    return x.tape._unary(OP_ABS, x) if _is_var(x) else abs(x)


def maximum(x, y):
    if _is_var(x) or _is_var(y):
        t = x.tape if _is_var(x) else y.tape
        xv = x if _is_var(x) else t.const(x)
        yv = y if _is_var(y) else t.const(y)
        return t._binary(OP_MAX, xv, yv)
    return x if x >= y else y


def minimum(x, y):
    if _is_var(x) or _is_var(y):
        t = x.tape if _is_var(x) else y.tape
        xv = x if _is_var(x) else t.const(x)
        yv = y if _is_var(y) else t.const(y)
        return t._binary(OP_MIN, xv, yv)
    return x if x <= y else y


def power(x, y):
    if _is_var(x) or _is_var(y):
        t = x.tape if _is_var(x) else y.tape
        xv = x if _is_var(x) else t.const(x)
        yv = y if _is_var(y) else t.const(y)
        return t._binary(OP_POW, xv, yv)
    return x**y


def check_gradient(
    fn: Callable[[Tape, list[Var]], Var],
    point: Sequence[float],
    step: float = 1e-5,
    engine=None,
) -> float:
    """Compare tape adjoints of ``fn`` against central finite differences.

    ``fn(tape, xs)`` records a scalar expression of the leaves ``xs``.  Each
    finite-difference evaluation re-records a fresh graph, so the check stays
    independent of primal re-execution.  Returns
    ``max_i |analytic_i - fd_i| / max(1, |analytic_i|)``.
    """
    point = [float(p) for p in point]

    def evaluate(coords: Sequence[float]) -> float:
        t = Tape(engine=engine)
        xs = [t.input(c) for c in coords]
        out = fn(t, xs)
        v = t.value(out)
        if not math.isfinite(v):
            raise NonFiniteError("non-finite evaluation in check_gradient", out.i)
        return v

    t = Tape(engine=engine)
    xs = [t.input(c) for c in point]
    out = fn(t, xs)
    if not math.isfinite(t.value(out)):
        raise NonFiniteError("non-finite evaluation in check_gradient", out.i)
    analytic = t.gradient(out, xs)

    worst = 0.0
    for i in range(len(point)):
        hi = list(point)
        lo = list(point)
        hi[i] += step
        lo[i] -= step
        fd = (evaluate(hi) - evaluate(lo)) / (2.0 * step)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst

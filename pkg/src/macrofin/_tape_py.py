"""Pure-Python tape execution engine.

Reference implementation of the engine contract; selected at import when the
compiled extension is unavailable (or when ``MACROFIN_PURE_PY=1``).  Semantics
match ``_tape_c`` exactly, including branch and tie conventions; only the
throughput differs (see benchmarks/bench_tape.py).
"""

import math

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


def forward(op, a, b, args, primal, n) -> int:
    """Re-execute primals in recording order.

    Returns the id of the first non-finite primal, or -1 on success.
    Input/const nodes are skipped (their primals are externally managed).
    """
    isfinite = math.isfinite
    for i in range(n):
        o = op[i]
        if o <= OP_CONST:
            continue
        ai = a[i]
        if o == OP_ADD:
            v = primal[ai] + primal[b[i]]
        elif o == OP_SUB:
            v = primal[ai] - primal[b[i]]
        elif o == OP_MUL:
            v = primal[ai] * primal[b[i]]
        elif o == OP_DIV:
            pb = primal[b[i]]
            v = primal[ai] / pb if pb != 0.0 else math.inf
        elif o == OP_POW:
            try:
                v = primal[ai] ** primal[b[i]]
            except (OverflowError, ValueError):
                v = math.nan
            if isinstance(v, complex):
                v = math.nan
        elif o == OP_EXP:
            x = primal[ai]
            v = math.exp(x) if x < 709.0 else math.inf
        elif o == OP_LN:
            x = primal[ai]
            v = math.log(x) if x > 0.0 else math.nan
        elif o == OP_TANH:
            v = math.tanh(primal[ai])
        elif o == OP_SIGMOID:
            x = primal[ai]
            v = 1.0 / (1.0 + math.exp(-x)) if x > -709.0 else 0.0
        elif o == OP_MAX:
            pa, pb = primal[ai], primal[b[i]]
            v = pa if pa >= pb else pb
        elif o == OP_MIN:
            pa, pb = primal[ai], primal[b[i]]
            v = pa if pa <= pb else pb
        elif o == OP_ABS:
            v = abs(primal[ai])
        elif o == OP_SQRT:
            x = primal[ai]
            v = math.sqrt(x) if x >= 0.0 else math.nan
        elif o == OP_NEG:
            v = -primal[ai]
        elif o == OP_DOT:
            v = 0.0
            base = ai
            for k in range(b[i]):
                v += primal[args[base + 2 * k]] * primal[args[base + 2 * k + 1]]
        elif o == OP_SUM:
            v = 0.0
            base = ai
            for k in range(b[i]):
                v += primal[args[base + k]]
        else:
            return i
        primal[i] = v
        if not isfinite(v):
            return i
    return -1


def backward(op, a, b, args, primal, adjoint, out) -> int:
    """Accumulate adjoints of node ``out`` in reverse recording order.

    Ties in max/min route the derivative to the first operand; abs at zero
    uses subgradient +1.  Returns the id of the first non-finite adjoint
    produced, or -1.
    """
    isfinite = math.isfinite
    for i in range(out + 1):
        adjoint[i] = 0.0
    adjoint[out] = 1.0
    for i in range(out, -1, -1):
        g = adjoint[i]
        if g == 0.0:
            continue
        if not isfinite(g):
            return i
        o = op[i]
        if o <= OP_CONST:
            continue
        ai = a[i]
        if o == OP_ADD:
            adjoint[ai] += g
            adjoint[b[i]] += g
        elif o == OP_SUB:
            adjoint[ai] += g
            adjoint[b[i]] -= g
        elif o == OP_MUL:
            bi = b[i]
            adjoint[ai] += g * primal[bi]
            adjoint[bi] += g * primal[ai]
        elif o == OP_DIV:
            bi = b[i]
            pb = primal[bi]
            if pb != 0.0:
                adjoint[ai] += g / pb
                adjoint[bi] -= g * primal[i] / pb
            else:
                adjoint[ai] += math.inf
                adjoint[bi] -= math.inf
        elif o == OP_POW:
            bi = b[i]
            pa, pb = primal[ai], primal[bi]
            adjoint[ai] += g * pb * pa ** (pb - 1.0)
            if pa > 0.0:
                adjoint[bi] += g * primal[i] * math.log(pa)
        elif o == OP_EXP:
            adjoint[ai] += g * primal[i]
        elif o == OP_LN:
            pa = primal[ai]
            adjoint[ai] += g / pa if pa != 0.0 else math.inf
        elif o == OP_TANH:
            t = primal[i]
            adjoint[ai] += g * (1.0 - t * t)
        elif o == OP_SIGMOID:
            s = primal[i]
            adjoint[ai] += g * s * (1.0 - s)
        elif o == OP_MAX:
            if primal[ai] >= primal[b[i]]:
                adjoint[ai] += g
            else:
                adjoint[b[i]] += g
        elif o == OP_MIN:
            if primal[ai] <= primal[b[i]]:
                adjoint[ai] += g
            else:
                adjoint[b[i]] += g
        elif o == OP_ABS:
            adjoint[ai] += g if primal[ai] >= 0.0 else -g
        elif o == OP_SQRT:
            pi = primal[i]
            adjoint[ai] += g * 0.5 / pi if pi != 0.0 else math.inf
        elif o == OP_NEG:
            adjoint[ai] -= g
        elif o == OP_DOT:
            base = ai
            for k in range(b[i]):
                x = args[base + 2 * k]
                y = args[base + 2 * k + 1]
                adjoint[x] += g * primal[y]
                adjoint[y] += g * primal[x]
        elif o == OP_SUM:
            base = ai
            for k in range(b[i]):
                adjoint[args[base + k]] += g
    return -1

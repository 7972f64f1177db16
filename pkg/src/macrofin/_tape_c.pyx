# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled tape execution engine.

Same contract and semantics as ``macrofin._tape_py``; see that module for the
reference documentation.  Opcode integers are mirrored here and checked for
sync by the test suite via the ``OPCODES`` dict below.
"""

from libc.math cimport exp as c_exp, log as c_log, tanh as c_tanh, \
    sqrt as c_sqrt, pow as c_pow, fabs, isfinite, INFINITY, NAN

cdef enum:
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
    "input": OP_INPUT, "const": OP_CONST, "add": OP_ADD, "sub": OP_SUB,
    "mul": OP_MUL, "div": OP_DIV, "pow": OP_POW, "exp": OP_EXP, "ln": OP_LN,
    "tanh": OP_TANH, "sigmoid": OP_SIGMOID, "max": OP_MAX, "min": OP_MIN,
    "abs": OP_ABS, "sqrt": OP_SQRT, "neg": OP_NEG, "dot": OP_DOT,
    "sum": OP_SUM,
}


def forward(const signed char[::1] op, const int[::1] a,
            const int[::1] b, const int[::1] args,
            double[::1] primal, Py_ssize_t n):
    cdef Py_ssize_t bad
    with nogil:
        bad = _forward(op, a, b, args, primal, n)
    return bad


cdef Py_ssize_t _forward(const signed char[::1] op, const int[::1] a,
                         const int[::1] b, const int[::1] args,
                         double[::1] primal, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, k, base, cnt
    cdef int o
    cdef double v, pa, pb, x
    cdef int ai
    if True:
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
                v = primal[ai] / pb if pb != 0.0 else INFINITY
            elif o == OP_POW:
                v = c_pow(primal[ai], primal[b[i]])
            elif o == OP_EXP:
                x = primal[ai]
                v = c_exp(x) if x < 709.0 else INFINITY
            elif o == OP_LN:
                x = primal[ai]
                v = c_log(x) if x > 0.0 else NAN
            elif o == OP_TANH:
                v = c_tanh(primal[ai])
            elif o == OP_SIGMOID:
                x = primal[ai]
                v = 1.0 / (1.0 + c_exp(-x)) if x > -709.0 else 0.0
            elif o == OP_MAX:
                pa = primal[ai]
                pb = primal[b[i]]
                v = pa if pa >= pb else pb
            elif o == OP_MIN:
                pa = primal[ai]
                pb = primal[b[i]]
                v = pa if pa <= pb else pb
            elif o == OP_ABS:
                v = fabs(primal[ai])
            elif o == OP_SQRT:
                x = primal[ai]
                v = c_sqrt(x) if x >= 0.0 else NAN
            elif o == OP_NEG:
                v = -primal[ai]
            elif o == OP_DOT:
                v = 0.0
                base = ai
                cnt = b[i]
                for k in range(cnt):
                    v += primal[args[base + 2 * k]] * primal[args[base + 2 * k + 1]]
            elif o == OP_SUM:
                v = 0.0
                base = ai
                cnt = b[i]
                for k in range(cnt):
                    v += primal[args[base + k]]
            else:
                return i
            primal[i] = v
            if not isfinite(v):
                return i
    return -1


def backward(const signed char[::1] op, const int[::1] a,
             const int[::1] b, const int[::1] args,
             const double[::1] primal, double[::1] adjoint, Py_ssize_t out):
    cdef Py_ssize_t bad
    with nogil:
        bad = _backward(op, a, b, args, primal, adjoint, out)
    return bad


cdef Py_ssize_t _backward(const signed char[::1] op, const int[::1] a,
                          const int[::1] b, const int[::1] args,
                          const double[::1] primal, double[::1] adjoint,
                          Py_ssize_t out) noexcept nogil:
    cdef Py_ssize_t i, k, base, cnt
    cdef int o
    cdef double g, pa, pb, t, s, pi
    cdef int ai, bi, xk, yk
    if True:
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
                    adjoint[ai] += INFINITY
                    adjoint[bi] -= INFINITY
            elif o == OP_POW:
                bi = b[i]
                pa = primal[ai]
                pb = primal[bi]
                adjoint[ai] += g * pb * c_pow(pa, pb - 1.0)
                if pa > 0.0:
                    adjoint[bi] += g * primal[i] * c_log(pa)
            elif o == OP_EXP:
                adjoint[ai] += g * primal[i]
            elif o == OP_LN:
                pa = primal[ai]
                adjoint[ai] += g / pa if pa != 0.0 else INFINITY
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
                if primal[ai] >= 0.0:
                    adjoint[ai] += g
                else:
                    adjoint[ai] -= g
            elif o == OP_SQRT:
                pi = primal[i]
                adjoint[ai] += g * 0.5 / pi if pi != 0.0 else INFINITY
            elif o == OP_NEG:
                adjoint[ai] -= g
            elif o == OP_DOT:
                base = ai
                cnt = b[i]
                for k in range(cnt):
                    xk = args[base + 2 * k]
                    yk = args[base + 2 * k + 1]
                    adjoint[xk] += g * primal[yk]
                    adjoint[yk] += g * primal[xk]
            elif o == OP_SUM:
                base = ai
                cnt = b[i]
                for k in range(cnt):
                    adjoint[args[base + k]] += g
    return -1

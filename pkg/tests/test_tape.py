import math

import numpy as np
import pytest

from macrofin import _tape_py
from macrofin import tape as T
from macrofin.tape import DomainError, NonFiniteError, Tape, check_gradient

try:
    from macrofin import _tape_c
except ImportError:
    _tape_c = None

ENGINES = [_tape_py] + ([_tape_c] if _tape_c is not None else [])


def test_opcode_tables_in_sync():
    if _tape_c is None:
        pytest.skip("compiled engine not built")
    assert _tape_c.OPCODES == T.OPCODES


@pytest.mark.parametrize("engine", ENGINES)
class TestRecord:
    def test_mul_primal(self, engine):
        t = Tape(engine=engine)
        x, y = t.const(3.0), t.const(4.0)
        node = t.record("mul", [x, y])
        assert node.value == 12.0

    def test_tanh_zero(self, engine):
        t = Tape(engine=engine)
        node = t.record("tanh", [t.const(0.0)])
        assert node.value == 0.0

    def test_div_by_zero_raises_domain_error(self, engine):
        t = Tape(engine=engine)
        one, zero = t.const(1.0), t.const(0.0)
        with pytest.raises(DomainError):
            t.record("div", [one, zero])

    def test_ln_sqrt_domain_errors(self, engine):
        t = Tape(engine=engine)
        neg = t.const(-1.0)
        with pytest.raises(DomainError):
            t.record("ln", [neg])
        with pytest.raises(DomainError):
            t.record("sqrt", [neg])


@pytest.mark.parametrize("engine", ENGINES)
class TestBackward:
    def test_product_adjoints(self, engine):
        t = Tape(engine=engine)
        x, y = t.input(3.0), t.input(4.0)
        f = x * y
        t.backward(f)
        assert t.adjoint(x) == 4.0
        assert t.adjoint(y) == 3.0

    def test_tanh_prime_at_zero(self, engine):
        t = Tape(engine=engine)
        x = t.input(0.0)
        f = T.tanh(x)
        t.backward(f)
        assert t.adjoint(x) == 1.0

    def test_unreachable_leaf_gets_zero(self, engine):
        t = Tape(engine=engine)
        x, y = t.input(1.0), t.input(2.0)
        f = x * x
        t.backward(f)
        assert t.adjoint(y) == 0.0

    def test_swish_matches_central_difference(self, engine):
        rng = np.random.default_rng(7)
        for x0 in rng.uniform(-3, 3, size=8):
            t = Tape(engine=engine)
            x = t.input(x0)
            f = x * T.sigmoid(x)
            t.backward(f)
            h = 1e-5
            fd = ((x0 + h) / (1 + math.exp(-(x0 + h))) - (x0 - h) / (1 + math.exp(-(x0 - h)))) / (2 * h)
            assert abs(t.adjoint(x) - fd) / max(1, abs(fd)) < 1e-8

    def test_max_min_tie_goes_to_first(self, engine):
        t = Tape(engine=engine)
        x, y = t.input(2.0), t.input(2.0)
        f = T.maximum(x, y)
        t.backward(f)
        assert (t.adjoint(x), t.adjoint(y)) == (1.0, 0.0)
        g = T.minimum(x, y)
        t.backward(g)
        assert (t.adjoint(x), t.adjoint(y)) == (1.0, 0.0)

    def test_dot_and_sum_adjoints(self, engine):
        t = Tape(engine=engine)
        xs = [t.input(v) for v in (1.0, 2.0, 3.0)]
        ys = [t.input(v) for v in (4.0, 5.0, 6.0)]
        d = t.dot(xs, ys)
        assert d.value == 32.0
        t.backward(d)
        assert [t.adjoint(v) for v in xs] == [4.0, 5.0, 6.0]
        assert [t.adjoint(v) for v in ys] == [1.0, 2.0, 3.0]
        s = t.vsum(xs)
        assert s.value == 6.0

    def test_pow_with_variable_exponent(self, engine):
        t = Tape(engine=engine)
        x, y = t.input(2.0), t.input(3.0)
        f = x**y
        t.backward(f)
        assert abs(t.adjoint(x) - 3 * 2**2) < 1e-12
        assert abs(t.adjoint(y) - 8 * math.log(2)) < 1e-12


@pytest.mark.parametrize("engine", ENGINES)
class TestReexecution:
    def test_forward_refreshes_primals(self, engine):
        t = Tape(engine=engine)
        x = t.input(1.0)
        f = x * x + T.exp(x)
        t.set_value(x, 2.0)
        t.forward()
        assert abs(t.value(f) - (4.0 + math.exp(2.0))) < 1e-14

    def test_branches_resolve_on_fresh_primals(self, engine):
        t = Tape(engine=engine)
        x, y = t.input(1.0), t.input(5.0)
        f = T.maximum(x, y)
        t.backward(f)
        assert t.adjoint(y) == 1.0
        t.set_value(x, 10.0)
        t.forward()
        assert t.value(f) == 10.0
        t.backward(f)
        assert (t.adjoint(x), t.adjoint(y)) == (1.0, 0.0)

    def test_nonfinite_forward_flagged(self, engine):
        t = Tape(engine=engine)
        x = t.input(1.0)
        f = T.log(x)
        t.set_value(x, -1.0)
        with pytest.raises(NonFiniteError):
            t.forward()
        assert t.value(f) != t.value(f) or not math.isfinite(t.value(f))


def _random_graph(t, xs, rng):
    """Small random smooth expression of the leaves."""
    pool = list(xs)
    for _ in range(rng.integers(4, 12)):
        op = rng.integers(0, 6)
        a = pool[rng.integers(0, len(pool))]
        b = pool[rng.integers(0, len(pool))]
        if op == 0:
            pool.append(a + b)
        elif op == 1:
            pool.append(a * b)
        elif op == 2:
            pool.append(a - b)
        elif op == 3:
            pool.append(T.tanh(a))
        elif op == 4:
            pool.append(T.sigmoid(a * 0.5 + b * 0.25))
        else:
            pool.append(T.exp(a * 0.1))
    out = pool[-1]
    for v in pool[-4:-1]:
        out = out + v * 0.5
    return out


@pytest.mark.parametrize("engine", ENGINES)
def test_gradient_check_property_100_random_graphs(engine):
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(2, 5))
        point = rng.uniform(-1.5, 1.5, size=n)

        seed = int(rng.integers(0, 2**31))

        def fn(t, xs, seed=seed):
            return _random_graph(t, xs, np.random.default_rng(seed))

        err = check_gradient(fn, point, step=1e-5, engine=engine)
        assert err < 1e-6


@pytest.mark.parametrize("engine", ENGINES)
def test_check_gradient_quadratic_and_constant(engine):
    err = check_gradient(lambda t, xs: t.vsum([x * x for x in xs]), [1.0, -2.0, 3.0], engine=engine)
    assert err < 1e-10

    t = Tape(engine=engine)
    x = t.input(1.0)
    c = t.const(5.0) * 1.0
    t.backward(c)
    assert t.adjoint(x) == 0.0


@pytest.mark.parametrize("engine", ENGINES)
def test_linearity_of_backward(engine):
    rng = np.random.default_rng(3)
    for _ in range(20):
        t = Tape(engine=engine)
        xs = [t.input(v) for v in rng.uniform(-1, 1, size=3)]
        f = _random_graph(t, xs, rng)
        g = _random_graph(t, xs, rng)
        a, b = rng.uniform(-2, 2, size=2)
        comb = a * f + b * g
        t.backward(f)
        adj_f = np.array([t.adjoint(x) for x in xs])
        t.backward(g)
        adj_g = np.array([t.adjoint(x) for x in xs])
        t.backward(comb)
        adj_c = np.array([t.adjoint(x) for x in xs])
        expect = a * adj_f + b * adj_g
        scale = np.maximum(1.0, np.abs(expect))
        assert np.all(np.abs(adj_c - expect) / scale < 1e-12)


@pytest.mark.parametrize("engine", ENGINES)
def test_backward_determinism_bit_identical(engine):
    rng = np.random.default_rng(11)
    t = Tape(engine=engine)
    xs = [t.input(v) for v in rng.uniform(-1, 1, size=4)]
    f = _random_graph(t, xs, rng)
    t.backward(f)
    first = np.array([t.adjoint(x) for x in xs])
    for _ in range(3):
        t.forward()
        t.backward(f)
        again = np.array([t.adjoint(x) for x in xs])
        assert np.array_equal(first, again)


def test_engines_agree_bitwise():
    if _tape_c is None:
        pytest.skip("compiled engine not built")
    rng = np.random.default_rng(5)
    t = Tape(engine=_tape_py)
    xs = [t.input(v) for v in rng.uniform(-1, 1, size=5)]
    ys = [t.input(v) for v in rng.uniform(-1, 1, size=5)]
    f = t.dot(xs, ys) + _random_graph(t, xs + ys, rng)
    f = f + T.maximum(xs[0], ys[0]) + T.absolute(xs[1]) + T.sqrt(T.exp(xs[2]))
    t.forward()
    t.backward(f)
    p_py = np.frombuffer(t._primal, dtype=np.float64).copy()
    adj_py = t._adjoint.copy()
    t._engine = _tape_c
    t.forward()
    t.backward(f)
    p_c = np.frombuffer(t._primal, dtype=np.float64).copy()
    assert np.array_equal(p_py, p_c)
    assert np.array_equal(adj_py, t._adjoint)

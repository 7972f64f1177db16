import math

import numpy as np
import pytest

from macrofin.net import (
    Fnn,
    NetConfig,
    TapeNet,
    activation_eval,
    multiscale_features,
)
from macrofin.tape import Tape


def fd_value(fnn, x, out, eps=1e-4):
    """Central-difference gradient/Hessian oracle built on the numpy evaluator."""
    d = len(x)
    grad = np.empty(d)
    hess = np.empty((d, d))
    for i in range(d):
        hi, lo = x.copy(), x.copy()
        hi[i] += eps
        lo[i] -= eps
        grad[i] = (fnn.eval_numpy(hi)[0, out] - fnn.eval_numpy(lo)[0, out]) / (2 * eps)
    for i in range(d):
        for j in range(d):
            pp, pm, mp, mm = (x.copy() for _ in range(4))
            pp[[i, j]] += eps
            pp[i] += 0  # noqa: placeholder to keep shape explicit
            pp = x.copy()
            pp[i] += eps
            pp[j] += eps
            pm = x.copy()
            pm[i] += eps
            pm[j] -= eps
            mp = x.copy()
            mp[i] -= eps
            mp[j] += eps
            mm = x.copy()
            mm[i] -= eps
            mm[j] -= eps
            hess[i, j] = (
                fnn.eval_numpy(pp)[0, out]
                - fnn.eval_numpy(pm)[0, out]
                - fnn.eval_numpy(mp)[0, out]
                + fnn.eval_numpy(mm)[0, out]
            ) / (4 * eps * eps)
    return grad, hess


class TestActivations:
    def test_swish_at_zero(self):
        assert activation_eval("swish", 0.0) == (0.0, 0.5, 0.5)

    def test_tanh_at_zero(self):
        assert activation_eval("tanh", 0.0) == (0.0, 1.0, 0.0)

    def test_swish_first_derivative_matches_fd(self):
        rng = np.random.default_rng(0)
        h = 1e-5
        for z in rng.uniform(-4, 4, size=10):
            _, d1, d2 = activation_eval("swish", z)
            f = lambda x: x / (1 + math.exp(-x))
            fd1 = (f(z + h) - f(z - h)) / (2 * h)
            fd2 = (f(z + h) - 2 * f(z) + f(z - h)) / (h * h)
            assert abs(d1 - fd1) < 1e-8
            assert abs(d2 - fd2) < 1e-5

    def test_recorded_on_tape(self):
        t = Tape()
        z = t.input(0.7)
        a, d1, d2 = activation_eval("swish", z)
        t.backward(a)
        assert abs(t.adjoint(z) - d1.value) < 1e-14
        t.backward(d1)
        assert abs(t.adjoint(z) - d2.value) < 1e-14


class TestMultiscale:
    def test_values(self):
        assert multiscale_features(0.5, 3) == [0.5, 1.0, 1.5]
        assert multiscale_features(0.0, 10) == [0.0] * 10

    def test_jacobian_is_constant_column(self):
        # feature map x -> (x, 2x, ..., Kx) has Jacobian (1, 2, ..., K)^T
        k = 6
        for x in (0.3, -1.2):
            hi = multiscale_features(x + 1e-6, k)
            lo = multiscale_features(x - 1e-6, k)
            jac = [(h - l) / 2e-6 for h, l in zip(hi, lo)]
            assert np.allclose(jac, np.arange(1, k + 1))


class TestEval:
    def test_identity_affine(self):
        cfg = NetConfig((2, 2))
        net = Fnn(cfg, [np.eye(2)], [np.zeros(2)])
        assert np.allclose(net.eval_numpy([2.0, 3.0]), [2.0, 3.0])
        t = Tape()
        tn = TapeNet(net, t)
        ev = tn.eval([t.const(2.0), t.const(3.0)])
        assert [v.value for v in ev.value] == [2.0, 3.0]

    def test_zero_weights_give_bias(self):
        cfg = NetConfig((2, 3, 1), activation="tanh")
        net = Fnn(cfg, [np.zeros((3, 2)), np.zeros((1, 3))], [np.zeros(3), np.array([0.7])])
        assert np.allclose(net.eval_numpy([0.4, -0.1]), [[0.7]])

    @pytest.mark.parametrize("act", ["tanh", "swish"])
    @pytest.mark.parametrize("multiscale", [0, 5])
    def test_tape_matches_numpy_reimplementation(self, act, multiscale):
        d_in = 1 if multiscale else 2
        cfg = NetConfig((d_in, 8, 8, 2), activation=act, multiscale=multiscale)
        net = Fnn.init(cfg, seed=3)
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, size=d_in)
        t = Tape()
        tn = TapeNet(net, t)
        ev = tn.eval([t.const(v) for v in x])
        ref = net.eval_numpy(x)[0]
        for o in range(2):
            assert abs(ev.value[o].value - ref[o]) < 1e-15 * max(1, abs(ref[o]))

    def test_final_layer_is_linear(self):
        # doubling last-layer weights and bias doubles the output
        cfg = NetConfig((2, 6, 1), activation="swish")
        net = Fnn.init(cfg, seed=9)
        x = np.array([0.3, -0.4])
        y1 = net.eval_numpy(x)[0, 0]
        net.weights[-1] *= 2.0
        net.biases[-1] *= 2.0
        y2 = net.eval_numpy(x)[0, 0]
        assert abs(y2 - 2 * y1) < 1e-14


class TestInputDerivatives:
    def test_affine_net_derivatives(self):
        cfg = NetConfig((2, 1))
        net = Fnn(cfg, [np.array([[3.0, 2.0]])], [np.zeros(1)])
        t = Tape()
        tn = TapeNet(net, t)
        ev = tn.eval([t.const(0.5), t.const(-1.0)], order=2)
        assert [g.value for g in ev.grad[0]] == [3.0, 2.0]
        for c in [(0, 0), (0, 1), (1, 1)]:
            assert ev.hess_at(*c)[0].value == 0.0

    def test_single_tanh_neuron(self):
        cfg = NetConfig((1, 1, 1), activation="tanh")
        net = Fnn(cfg, [np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
        t = Tape()
        tn = TapeNet(net, t)
        ev = tn.eval([t.const(0.0)], order=2)
        assert ev.value[0].value == 0.0
        assert ev.grad[0][0].value == 1.0
        assert ev.hess_at(0, 0)[0].value == 0.0

    @pytest.mark.parametrize("act", ["tanh", "swish"])
    def test_random_net_derivs_match_fd(self, act):
        cfg = NetConfig((2, 8, 8, 8, 1), activation=act)
        net = Fnn.init(cfg, seed=17)
        rng = np.random.default_rng(18)
        for _ in range(3):
            x = rng.uniform(-0.8, 0.8, size=2)
            t = Tape()
            tn = TapeNet(net, t)
            ev = tn.eval([t.const(v) for v in x], order=2)
            grad_fd, hess_fd = fd_value(net, x, out=0)
            for d in range(2):
                err = abs(ev.grad[0][d].value - grad_fd[d]) / max(1, abs(grad_fd[d]))
                assert err < 1e-6
            for i in range(2):
                for j in range(2):
                    err = abs(ev.hess_at(i, j)[0].value - hess_fd[i, j]) / max(
                        1, abs(hess_fd[i, j])
                    )
                    assert err < 1e-6

    def test_input_scaling_chains_derivatives(self):
        cfg = NetConfig((2, 6, 1), activation="tanh", input_lo=(0.01, 0.2), input_hi=(1.2, 10.0))
        net = Fnn.init(cfg, seed=21)
        x = np.array([0.9, 4.0])
        t = Tape()
        tn = TapeNet(net, t)
        ev = tn.eval([t.const(v) for v in x], order=2)
        grad_fd, hess_fd = fd_value(net, x, out=0, eps=1e-4)
        for d in range(2):
            assert abs(ev.grad[0][d].value - grad_fd[d]) / max(1, abs(grad_fd[d])) < 1e-6
        assert abs(ev.hess_at(1, 1)[0].value - hess_fd[1, 1]) / max(1, abs(hess_fd[1, 1])) < 1e-5

    def test_multiscale_derivs_match_fd(self):
        cfg = NetConfig((1, 8, 8, 2), activation="swish", multiscale=10)
        net = Fnn.init(cfg, seed=23)
        for x0 in (0.05, 0.3):
            t = Tape()
            tn = TapeNet(net, t)
            ev = tn.eval([t.const(x0)], order=2)
            grad_fd, hess_fd = fd_value(net, np.array([x0]), out=1)
            assert abs(ev.grad[1][0].value - grad_fd[0]) / max(1, abs(grad_fd[0])) < 1e-6
            assert abs(ev.hess_at(0, 0)[1].value - hess_fd[0, 0]) / max(1, abs(hess_fd[0, 0])) < 1e-6

    def test_parameter_gradient_of_input_derivative(self):
        # d/dtheta of (du/dx at fixed x) must match finite differences over theta
        cfg = NetConfig((1, 6, 1), activation="tanh")
        net = Fnn.init(cfg, seed=29)
        x0 = 0.37
        t = Tape()
        tn = TapeNet(net, t)
        ev = tn.eval([t.const(x0)], order=1)
        t.backward(ev.grad[0][0])
        analytic = t.adjoints(tn.leaf_ids)

        theta = net.flat()
        h = 1e-5
        rng = np.random.default_rng(31)
        for idx in rng.choice(theta.size, size=8, replace=False):
            for sign, store in ((+1, "hi"), (-1, "lo")):
                th = theta.copy()
                th[idx] += sign * h
                net.set_flat(th)
                _, jac = net.eval_numpy_with_grad([x0])
                if sign > 0:
                    hi = jac[0, 0, 0]
                else:
                    lo = jac[0, 0, 0]
            net.set_flat(theta)
            fd = (hi - lo) / (2 * h)
            assert abs(analytic[idx] - fd) / max(1, abs(fd)) < 1e-5


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = NetConfig((1, 8, 4, 2), activation="swish", multiscale=7)
        net = Fnn.init(cfg, seed=5)
        p = tmp_path / "net.bin"
        net.save(p)
        back = Fnn.load(p)
        assert back.config == cfg
        assert np.array_equal(back.flat(), net.flat())
        x = np.array([0.42])
        assert np.array_equal(back.eval_numpy(x), net.eval_numpy(x))

    def test_scaling_roundtrip(self, tmp_path):
        cfg = NetConfig((2, 4, 1), input_lo=(0.0, 1.0), input_hi=(2.0, 3.0))
        net = Fnn.init(cfg, seed=6)
        p = tmp_path / "net.bin"
        net.save(p)
        back = Fnn.load(p)
        assert back.config.input_lo == cfg.input_lo
        assert back.config.input_hi == cfg.input_hi

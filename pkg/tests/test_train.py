import numpy as np
import pytest

from macrofin.net import Fnn, NetConfig, TapeNet
from macrofin.tape import Tape
from macrofin.train import (
    AdamState,
    CollocationSet,
    LrSchedule,
    Problem,
    TrainableScalar,
    adam_step,
    lr_at,
    sample_points,
    train,
)


class TestLrSchedule:
    def test_inverse_time_at_zero(self):
        s = LrSchedule("inverse_time", gamma0=3e-4, step=6000)
        assert lr_at(s, 0) == 3e-4

    def test_inverse_time_halves_at_decay_step(self):
        s = LrSchedule("inverse_time", gamma0=1e-3, step=2500)
        assert abs(lr_at(s, 2500) - 5e-4) < 1e-18

    def test_exponential_decay_rate(self):
        s = LrSchedule("exponential", gamma0=1e-3, step=1500, rate=0.5)
        assert abs(lr_at(s, 1500) - 5e-4) < 1e-18

    def test_phased(self):
        s = LrSchedule(
            "phased",
            phases=(
                (100, LrSchedule("exponential", gamma0=1e-3, step=50, rate=0.5)),
                (100, LrSchedule("exponential", gamma0=1e-5, step=50, rate=0.5)),
            ),
        )
        assert lr_at(s, 0) == 1e-3
        assert lr_at(s, 100) == 1e-5
        assert abs(lr_at(s, 150) - 5e-6) < 1e-20

    def test_monotone_non_increasing(self):
        for s in (
            LrSchedule("inverse_time", gamma0=1e-3, step=100),
            LrSchedule("exponential", gamma0=1e-2, step=300, rate=0.7),
        ):
            lrs = [lr_at(s, n) for n in range(0, 5000, 37)]
            assert all(a >= b for a, b in zip(lrs, lrs[1:]))
            assert all(v > 0 for v in lrs)


class TestSampling:
    def test_reproducible(self):
        a = sample_points([0.0], [1.0], 4, seed=5)
        b = sample_points([0.0], [1.0], 4, seed=5)
        assert np.array_equal(a.points, b.points)
        assert len(a) == 4
        assert np.all((a.points > 0) & (a.points < 1))

    def test_degenerate_domain_rejected(self):
        with pytest.raises(ValueError):
            sample_points([1.0], [1.0], 3, seed=0)

    def test_injection(self):
        extra = np.linspace(0, 1e-4, 10)[:, None]
        s = sample_points([0.0], [1.0], 100, seed=1, inject=extra)
        assert len(s) == 110
        assert np.array_equal(s.points[:10], extra)


class TestAdam:
    def test_zero_gradient_keeps_values(self):
        vals = np.array([1.0, -2.0])
        st = AdamState.zeros(2)
        st.m[:] = 0.5
        st.v[:] = 0.25
        adam_step(vals, np.zeros(2), st, lr=1e-2)
        assert np.allclose(vals, [1.0, -2.0], atol=2e-2 * 0.5 / 0.5)
        # moments decayed toward zero
        assert np.all(st.m < 0.5) and np.all(st.v < 0.25)

    def test_first_step_magnitude_is_lr(self):
        vals = np.array([0.0])
        st = AdamState.zeros(1)
        adam_step(vals, np.array([123.4]), st, lr=1e-3)
        assert abs(abs(vals[0]) - 1e-3) < 1e-6

    def test_quadratic_bowl_converges(self):
        vals = np.array([0.0])
        st = AdamState.zeros(1)
        for _ in range(2000):
            g = 2 * (vals - 3.0)
            adam_step(vals, g, st, lr=1e-2)
        assert abs(vals[0] - 3.0) < 1e-3

    def test_nan_gradient_aborts(self):
        with pytest.raises(FloatingPointError):
            adam_step(np.zeros(1), np.array([np.nan]), AdamState.zeros(1), 1e-3)


class TestLossAssembly:
    def test_constant_residuals(self):
        p = Problem()
        t = p.tape
        start = p.term_start()
        rs = [t.const(2.0) * 1.0 for _ in range(3)]
        p.add_term("flat", 5.0, rs, start=start)
        loss = p.finalize()
        assert t.value(loss) == 20.0  # 5 * mean(4,4,4)

    def test_zero_residuals(self):
        p = Problem()
        rs = [p.tape.const(0.0) * 1.0 for _ in range(4)]
        p.add_term("zero", 7.0, rs)
        assert p.tape.value(p.finalize()) == 0.0

    def test_additivity(self):
        p = Problem()
        t = p.tape
        r1 = [t.const(1.0) * 1.0, t.const(3.0) * 1.0]
        r2 = [t.const(2.0) * 1.0]
        term1 = p.add_term("a", 2.0, r1)
        term2 = p.add_term("b", 3.0, r2)
        loss = p.finalize()
        expect = 2.0 * t.value(term1.node) + 3.0 * t.value(term2.node)
        assert t.value(loss) == expect

    def test_masked_mean(self):
        p = Problem()
        t = p.tape
        rs = [t.const(v) * 1.0 for v in (1.0, 2.0, 3.0)]
        masks = [t.const(m) for m in (1.0, 0.0, 1.0)]
        term = p.add_term("masked", 1.0, rs, masks=masks)
        p.finalize()
        assert abs(t.value(term.node) - (1.0 + 9.0) / 3.0) < 1e-15

    def test_term_of_node_lookup(self):
        p = Problem()
        t = p.tape
        s0 = p.term_start()
        r1 = [t.const(1.0) * 1.0]
        p.add_term("first", 1.0, r1, start=s0)
        s1 = p.term_start()
        r2 = [t.const(2.0) * 1.0]
        p.add_term("second", 1.0, r2, start=s1)
        assert p.term_of_node(r1[0].i) == "first"
        assert p.term_of_node(r2[0].i) == "second"


def quadratic_problem(scale: float, init: float = 0.0, c: float = 1.7) -> Problem:
    p = Problem()
    lam = TrainableScalar("lam", init=init, scale=scale)
    p.add_trainable(lam)
    start = p.term_start()
    resid = lam.display - c
    p.add_term("fit", 1.0, [resid], kind="extra-information", start=start)
    p.finalize()
    return p


class TestTrain:
    def test_zero_iterations_unchanged(self):
        p = quadratic_problem(1.0, init=0.3)
        sol = train(p, 0, LrSchedule("inverse_time", gamma0=1e-2, step=100))
        assert sol.trainables["lam"] == 0.3

    def test_deterministic_histories(self):
        def run():
            p = quadratic_problem(10.0, init=0.1)
            return train(p, 500, LrSchedule("inverse_time", gamma0=1e-2, step=200), log_every=50)

        a, b = run(), run()
        assert np.array_equal(a.loss_history, b.loss_history)
        assert np.array_equal(a.trainable_history, b.trainable_history)

    def test_scaling_invariance_of_optimum(self):
        # the converged display value must not depend on the training scale
        finals = []
        for scale in (1.0, 100.0):
            p = quadratic_problem(scale, init=1.68)
            sol = train(p, 10000, LrSchedule("exponential", gamma0=5e-2, step=300, rate=0.5))
            finals.append(sol.trainables["lam"])
        assert abs(finals[0] - 1.7) < 1e-6
        assert abs(finals[0] - finals[1]) < 1e-6

    def test_bounds_respected_in_history(self):
        p = Problem()
        lam = TrainableScalar("lam", init=0.45, scale=1.0, lo=0.3, hi=0.5)
        p.add_trainable(lam)
        resid = lam.display - 5.0  # optimum far outside the box
        p.add_term("fit", 1.0, [resid], kind="extra-information")
        p.finalize()
        sol = train(p, 300, LrSchedule("inverse_time", gamma0=1e-1, step=100), log_every=10)
        assert np.all(sol.trainable_history >= 0.3 - 1e-12)
        assert np.all(sol.trainable_history <= 0.5 + 1e-12)
        assert abs(sol.trainables["lam"] - 0.5) < 1e-9

    def test_loss_history_finite(self):
        p = quadratic_problem(1.0)
        sol = train(p, 200, LrSchedule("exponential", gamma0=1e-2, step=100), log_every=20)
        assert np.all(np.isfinite(sol.loss_history))


@pytest.mark.slow
def test_toy_poisson_pinn():
    # u'' = 2 on (0,1), u(0)=u(1)=0 has the closed-form solution x^2 - x
    cfg = NetConfig((1, 8, 8, 1), activation="tanh")
    fnn = Fnn.init(cfg, seed=11)
    p = Problem()
    t = p.tape
    net = p.add_net("u", TapeNet(fnn, t))

    pts = sample_points([0.0], [1.0], 32, seed=7)
    start = p.term_start()
    interior = []
    for x0 in pts.points[:, 0]:
        ev = net.eval([t.const(x0)], order=2, hess_coords=[(0, 0)])
        interior.append(ev.hess_at(0, 0)[0] - 2.0)
    p.add_term("pde", 1.0, interior, start=start)

    start = p.term_start()
    bc = []
    for xb in (0.0, 1.0):
        ev = net.eval([t.const(xb)], order=0)
        bc.append(ev.value[0] - 0.0)
    p.add_term("bc", 10.0, bc, kind="boundary-residual", start=start)
    p.finalize()

    train(p, 20000, LrSchedule("inverse_time", gamma0=2e-2, step=4000), log_every=1000)

    xs = np.linspace(0, 1, 101)[:, None]
    pred = fnn.eval_numpy(xs)[:, 0]
    exact = xs[:, 0] ** 2 - xs[:, 0]
    rel = np.linalg.norm(pred - exact) / np.linalg.norm(exact)
    assert rel < 0.01

"""Loss assembly and training loop.

A :class:`Problem` owns one tape carrying every residual of a solve: weighted
loss terms over collocation sets, network parameter leaves and trainable
scalars.  Training re-executes the tape (forward), accumulates adjoints
(backward) and applies Adam steps to the leaf vector, with periodic callbacks
(mask and point-wise coefficient refreshes) at their declared cadence.

Collocation points are sampled once and stay fixed for the whole run; the
graph is recorded once and re-executed, with branch operations resolving
against fresh primals each sweep and refreshable const nodes carrying any
value that is recomputed at a cadence.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tape import NonFiniteError, Tape, Var
from .net import TapeNet


class TrainingAborted(RuntimeError):
    """A non-finite value stopped a training step.

    Carries the iteration, the loss term the bad node belongs to and a copy
    of the leaf values for post-mortem inspection.
    """

    def __init__(self, iteration: int, term: str, node: int, leaf_values: np.ndarray):
        super().__init__(
            f"non-finite value at iteration {iteration} in term {term!r} (node {node})"
        )
        self.iteration = iteration
        self.term = term
        self.node = node
        self.leaf_values = leaf_values


@dataclass
class TrainableScalar:
    """A co-trained scalar unknown with display<->training scaling.

    The tape leaf holds the *training* value ``display * scale``; formulas use
    the display expression.  Optional box bounds act on the display value and
    are re-applied by clamping after every step.
    """

    name: str
    init: float
    scale: float = 1.0
    lo: float | None = None
    hi: float | None = None
    var: Var | None = None
    display: Var | None = None

    def bind(self, tape: Tape) -> "TrainableScalar":
        if self.var is not None:
            raise RuntimeError(f"trainable {self.name!r} already bound")
        self.var = tape.input(self.init * self.scale)
        self.display = self.var * (1.0 / self.scale)
        return self

    def display_value(self) -> float:
        return self.var.value / self.scale

    def clamp_training_value(self, v: float) -> float:
        if self.lo is not None:
            v = max(v, self.lo * self.scale)
        if self.hi is not None:
            v = min(v, self.hi * self.scale)
        return v


@dataclass
class LrSchedule:
    """Learning-rate decay.

    inverse_time: gamma0 / (1 + n/step).
    exponential:  gamma0 * rate**(n/step)  (continuous form).
    phased:       consecutive sub-schedules, each with its own length; the
                  iteration counter restarts at every phase boundary.
    """

    kind: str = "inverse_time"
    gamma0: float = 1e-3
    step: float = 1000.0
    rate: float = 0.5
    phases: tuple[tuple[int, "LrSchedule"], ...] | None = None

    def lr_at(self, n: int) -> float:
        if self.kind == "phased":
            offset = 0
            for length, sub in self.phases:
                if n < offset + length:
                    return sub.lr_at(n - offset)
                offset += length
            return self.phases[-1][1].lr_at(n - offset + self.phases[-1][0])
        if self.kind == "inverse_time":
            return self.gamma0 / (1.0 + n / self.step)
        if self.kind == "exponential":
            return self.gamma0 * self.rate ** (n / self.step)
        raise ValueError(f"unknown schedule kind {self.kind!r}")


def lr_at(schedule: LrSchedule, n: int) -> float:
    return schedule.lr_at(n)


@dataclass
class CollocationSet:
    points: np.ndarray  # (n, d)
    label: str = "interior"

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))

    def __len__(self):
        return self.points.shape[0]


def sample_points(
    lo: Sequence[float],
    hi: Sequence[float],
    n: int,
    seed: int,
    label: str = "interior",
    inject: np.ndarray | None = None,
) -> CollocationSet:
    """Seeded uniform interior sample over a box, plus optional fixed points."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if n < 1:
        raise ValueError("need at least one point")
    if np.any(hi <= lo):
        raise ValueError("degenerate domain")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n, lo.size))
    if inject is not None:
        pts = np.vstack([np.atleast_2d(inject), pts])
    return CollocationSet(pts, label)


@dataclass
class LossTerm:
    """One weighted term of the objective.

    ``node`` is the unweighted aggregate (mean square over the term's point
    set, or the squared scalar for extra-information terms); ``node_range``
    spans every tape node recorded while building the term, used to map
    non-finite nodes back to a term name.
    """

    name: str
    weight: float
    kind: str
    node: Var
    node_range: tuple[int, int]
    n_points: int
    mask_ids: np.ndarray | None = None


class Problem:
    """Tape, networks, trainables, loss terms and refresh callbacks."""

    def __init__(self, tape: Tape | None = None):
        self.tape = tape if tape is not None else Tape()
        self.nets: dict[str, TapeNet] = {}
        self.trainables: list[TrainableScalar] = []
        self.terms: list[LossTerm] = []
        self.loss: Var | None = None
        self.refreshers: list[tuple[int, Callable[["Problem", int], None]]] = []
        self.meta: dict = {}

    def add_net(self, name: str, tapenet: TapeNet) -> TapeNet:
        self.nets[name] = tapenet
        return tapenet

    def add_trainable(self, ts: TrainableScalar) -> TrainableScalar:
        self.trainables.append(ts.bind(self.tape))
        return ts

    def add_refresher(self, every: int, fn: Callable[["Problem", int], None]) -> None:
        self.refreshers.append((every, fn))

    def term_start(self) -> int:
        return len(self.tape)

    def add_term(
        self,
        name: str,
        weight: float,
        residuals: Sequence[Var],
        kind: str = "interior-residual",
        masks: Sequence[Var] | None = None,
        start: int | None = None,
    ) -> LossTerm:
        """Mean-squared aggregation of per-point residuals (masked optionally).

        ``start`` should be the tape length captured *before* the residuals
        were recorded so that diagnostics cover the whole construction.
        """
        t = self.tape
        if start is None:
            start = self.term_start()
        n = len(residuals)
        squares = [r * r for r in residuals]
        if masks is not None:
            agg = t.dot(list(masks), squares) * (1.0 / n)
            mask_ids = np.asarray([m.i for m in masks], dtype=np.int64)
        else:
            agg = t.vsum(squares) * (1.0 / n) if n > 1 else squares[0]
            mask_ids = None
        term = LossTerm(name, float(weight), kind, agg, (start, len(t)), n, mask_ids)
        self.terms.append(term)
        return term

    def finalize(self) -> Var:
        t = self.tape
        weighted = [t.const(term.weight) * term.node for term in self.terms]
        self.loss = t.vsum(weighted) if len(weighted) > 1 else weighted[0]
        ids = []
        for net in self.nets.values():
            ids.append(net.leaf_ids)
        ts_ids = np.asarray([ts.var.i for ts in self.trainables], dtype=np.int64)
        self.leaf_ids = np.concatenate(ids + [ts_ids]) if ids else ts_ids
        self.n_net_params = int(sum(n.leaf_ids.size for n in self.nets.values()))
        return self.loss

    def term_of_node(self, node: int) -> str:
        starts = [term.node_range[0] for term in self.terms]
        k = bisect.bisect_right(starts, node) - 1
        if k >= 0 and node < self.terms[k].node_range[1]:
            return self.terms[k].name
        return "<outside terms>"

    def term_values(self) -> dict[str, float]:
        return {term.name: self.tape.value(term.node) for term in self.terms}

    def trainable_values(self) -> dict[str, float]:
        return {ts.name: ts.display_value() for ts in self.trainables}


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kw)


def adam_step(values: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient in adam_step")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    mhat = state.m / (1 - state.beta1**state.t)
    vhat = state.v / (1 - state.beta2**state.t)
    values -= lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class TrainedSolution:
    iterations: int
    loss_history: np.ndarray        # columns: iteration, lr, total
    term_history: np.ndarray        # (n_logs, n_terms) unweighted
    term_names: list[str]
    trainable_history: np.ndarray   # (n_logs, n_trainables) display values
    trainable_names: list[str]
    trainables: dict[str, float]
    final_loss: float

    def history_csv(self, path) -> None:
        cols = ["iteration", "lr", "total_loss"]
        cols += [f"term:{n}" for n in self.term_names]
        cols += [f"trainable:{n}" for n in self.trainable_names]
        data = np.hstack(
            [
                self.loss_history,
                self.term_history,
                self.trainable_history.reshape(self.loss_history.shape[0], -1),
            ]
        )
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for row in data:
                f.write(",".join(repr(float(v)) for v in row) + "\n")


def train(
    problem: Problem,
    iterations: int,
    schedule: LrSchedule,
    log_every: int = 100,
    adam: AdamState | None = None,
) -> TrainedSolution:
    """Run Adam on the problem's leaves; deterministic given its inputs."""
    if problem.loss is None:
        problem.finalize()
    tape = problem.tape
    leaf_ids = problem.leaf_ids
    values = tape.values(leaf_ids).copy()
    if adam is None:
        adam = AdamState.zeros(values.size)

    n_ts = len(problem.trainables)
    ts_slice = slice(values.size - n_ts, values.size)

    def clamp():
        for k, ts in enumerate(problem.trainables):
            values[ts_slice][k] = ts.clamp_training_value(values[ts_slice][k])

    clamp()
    tape.set_values(leaf_ids, values)
    tape.forward()
    for _, fn in problem.refreshers:
        fn(problem, 0)

    logs, term_logs, ts_logs = [], [], []

    def run_sweeps(n: int):
        try:
            tape.forward()
            tape.backward(problem.loss)
        except NonFiniteError as e:
            raise TrainingAborted(
                n, problem.term_of_node(e.node), e.node, values.copy()
            ) from e

    for n in range(iterations):
        if n > 0:
            for every, fn in problem.refreshers:
                if every > 0 and n % every == 0:
                    fn(problem, n)
        tape.set_values(leaf_ids, values)
        run_sweeps(n)
        lr = schedule.lr_at(n)
        if n % log_every == 0 or n == iterations - 1:
            logs.append((n, lr, tape.value(problem.loss)))
            term_logs.append([tape.value(term.node) for term in problem.terms])
            ts_logs.append([ts.display_value() for ts in problem.trainables])
        grads = tape.adjoints(leaf_ids)
        try:
            adam_step(values, grads, adam, lr)
        except FloatingPointError:
            bad = int(np.flatnonzero(~np.isfinite(grads))[0])
            raise TrainingAborted(
                n, f"<gradient of leaf {bad}>", int(leaf_ids[bad]), values.copy()
            )
        clamp()

    tape.set_values(leaf_ids, values)
    if iterations > 0:
        run_sweeps(iterations)
    for net in problem.nets.values():
        net.pull_values()

    if not logs:
        logs.append((0, schedule.lr_at(0), tape.value(problem.loss)))
        term_logs.append([tape.value(term.node) for term in problem.terms])
        ts_logs.append([ts.display_value() for ts in problem.trainables])

    return TrainedSolution(
        iterations=iterations,
        loss_history=np.asarray(logs, dtype=float),
        term_history=np.asarray(term_logs, dtype=float),
        term_names=[term.name for term in problem.terms],
        trainable_history=np.asarray(ts_logs, dtype=float),
        trainable_names=[ts.name for ts in problem.trainables],
        trainables=problem.trainable_values(),
        final_loss=tape.value(problem.loss),
    )

"""Benchmark: compiled tape engine vs pure-Python fallback.

Builds a training-shaped graph (a batch of small dense networks with first
and second input derivatives, reduced to one scalar loss) and times repeated
forward+backward sweeps through both engines.

Run:  python3 benchmarks/bench_tape.py [--points N] [--width W] [--reps R]
"""

import argparse
import time

import numpy as np

from macrofin import tape as T
from macrofin import _tape_py

try:
    from macrofin import _tape_c
except ImportError:
    _tape_c = None


def build_batch_graph(n_points: int, width: int, depth: int, seed: int = 0):
    """A batch of per-point subgraphs shaped like a PINN residual pass."""
    rng = np.random.default_rng(seed)
    t = T.Tape(engine=_tape_py)  # engine swapped at run time
    weights = []
    dims = [1] + [width] * (depth - 1) + [2]
    params = []
    for li in range(len(dims) - 1):
        w = [[t.input(rng.normal(0, 0.5)) for _ in range(dims[li])] for _ in range(dims[li + 1])]
        b = [t.input(0.0) for _ in range(dims[li + 1])]
        weights.append((w, b))
        params.extend(v for row in w for v in row)
        params.extend(b)

    residuals = []
    for p in range(n_points):
        x = t.const(rng.uniform(0, 1))
        vals, d1, d2 = [x], [t.const(1.0)], [t.const(0.0)]
        for li, (w, b) in enumerate(weights):
            nv, n1, n2 = [], [], []
            last = li == len(weights) - 1
            for i in range(len(w)):
                z = t.dot(w[i], vals) + b[i]
                tz = t.dot(w[i], d1)
                uz = t.dot(w[i], d2)
                if last:
                    nv.append(z)
                    n1.append(tz)
                    n2.append(uz)
                else:
                    s = T.sigmoid(z)
                    a = z * s
                    sp = s * (1.0 + z * (1.0 - s))
                    spp = s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
                    nv.append(a)
                    n1.append(sp * tz)
                    n2.append(spp * tz * tz + sp * uz)
            vals, d1, d2 = nv, n1, n2
        residuals.append(vals[0] * d2[0] - d1[1] * vals[1] + d1[0])

    sq = [r * r for r in residuals]
    loss = t.vsum(sq) * (1.0 / n_points)
    return t, loss, params


def run(t, loss, engine, reps):
    t._engine = engine
    t.forward()
    t.backward(loss)
    start = time.perf_counter()
    for _ in range(reps):
        t.forward()
        t.backward(loss)
    return (time.perf_counter() - start) / reps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=256)
    ap.add_argument("--width", type=int, default=32)
    ap.add_argument("--depth", type=int, default=4)
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--pyreps", type=int, default=2)
    args = ap.parse_args()

    t, loss, params = build_batch_graph(args.points, args.width, args.depth)
    print(f"graph: {len(t)} nodes, {len(params)} parameters, {args.points} points")

    py = run(t, loss, _tape_py, args.pyreps)
    print(f"pure-python engine : {py * 1e3:9.2f} ms / iteration")
    if _tape_c is not None:
        cy = run(t, loss, _tape_c, args.reps)
        print(f"compiled engine    : {cy * 1e3:9.2f} ms / iteration")
        print(f"speedup            : {py / cy:9.1f}x")
    else:
        print("compiled engine    : not available")


if __name__ == "__main__":
    main()

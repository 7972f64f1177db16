"""Feed-forward networks with exact propagation of value, input gradient and
input Hessian, recorded as tape operations.

All derivative quantities (u, du/dx_i, d2u/dx_i dx_j) become tape nodes, so a
backward sweep over any residual built from them yields parameter gradients.
A layer propagates (values, Jacobian columns, Hessian entries) via

    z^l = W^l a^{l-1} + b^l
    J^l_d  = act'(z^l) * (W^l J^{l-1}_d)
    H^l_de = act''(z^l) * (W^l J^{l-1}_d)(W^l J^{l-1}_e) + act'(z^l) * (W^l H^{l-1}_de)

with the final affine layer applied without activation.  Only the Hessian
entries a caller asks for are recorded, which keeps the tape size bounded.

The module also provides an independent vectorized numpy evaluator (used for
post-training grids and as a duplicate-evaluation oracle in tests) and a small
binary checkpoint format, documented in the README.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tape import Tape, Var, sigmoid, tanh

ACTIVATIONS = {"tanh": 0, "swish": 1}
_ACT_NAMES = {v: k for k, v in ACTIVATIONS.items()}

_MAGIC = b"MFN1"


@dataclass
class NetConfig:
    """Architecture description.

    ``widths`` lists [d_in, hidden..., d_out]; the number of affine layers is
    ``len(widths) - 1``.  ``multiscale`` expands a scalar input x into the
    feature vector (x, 2x, ..., Kx) before the first affine layer.
    ``input_lo``/``input_hi`` min-max scale each input coordinate to [0, 1]
    before any feature expansion; derivative outputs always refer to the
    original coordinates.
    """

    widths: tuple[int, ...]
    activation: str = "tanh"
    multiscale: int = 0
    input_lo: tuple[float, ...] | None = None
    input_hi: tuple[float, ...] | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.multiscale and self.widths[0] != 1:
            raise ValueError("multiscale features require a scalar input")
        if (self.input_lo is None) != (self.input_hi is None):
            raise ValueError("input_lo and input_hi must be given together")

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def d_out(self) -> int:
        return self.widths[-1]

    @property
    def feature_dim(self) -> int:
        return self.multiscale if self.multiscale else self.widths[0]

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.feature_dim] + list(self.widths[1:])
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def multiscale_features(x: float, k: int) -> list[float]:
    """Feature vector (x, 2x, ..., kx)."""
    if k < 1:
        raise ValueError("multiscale feature count must be >= 1")
    return [x * i for i in range(1, k + 1)]


def activation_eval(kind: str, z):
    """Activation value and its first two derivatives at z.

    Works on floats or tape Vars (recorded on the tape in the latter case).
    tanh:  (tanh z, 1 - tanh^2 z, -2 tanh z (1 - tanh^2 z))
    swish: (z*s, s*(1 + z*(1-s)), s*(1-s)*(2 + z*(1-2s)))  with s = sigmoid(z)
    """
    if kind == "tanh":
        a = tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    if kind == "swish":
        s = sigmoid(z)
        return (
            z * s,
            s * (1.0 + z * (1.0 - s)),
            s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s)),
        )
    raise ValueError(f"unknown activation {kind!r}")


class Fnn:
    """Network parameters plus numpy-side evaluation and checkpointing."""

    def __init__(self, config: NetConfig, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.config = config
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, config: NetConfig, seed: int) -> "Fnn":
        """Glorot-uniform weights, zero biases (seeded)."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_out, n_in in config.layer_dims():
            limit = np.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(config, weights, biases)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        """Parameters in layer order: W1 row-major, b1, W2, b2, ..."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat(self, values: np.ndarray) -> None:
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = values[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = values[pos : pos + b.size]
            pos += b.size
        if pos != values.size:
            raise ValueError("parameter vector length mismatch")

    # -- checkpoint io -------------------------------------------------------

    def save(self, path) -> None:
        cfg = self.config
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", len(cfg.widths) - 1))
            f.write(struct.pack(f"<{len(cfg.widths)}I", *cfg.widths))
            f.write(struct.pack("<I", ACTIVATIONS[cfg.activation]))
            f.write(struct.pack("<I", cfg.multiscale))
            has_scaling = cfg.input_lo is not None
            f.write(struct.pack("<B", int(has_scaling)))
            if has_scaling:
                f.write(np.asarray(cfg.input_lo, dtype="<f8").tobytes())
                f.write(np.asarray(cfg.input_hi, dtype="<f8").tobytes())
            f.write(self.flat().astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Fnn":
        with open(path, "rb") as f:
            if f.read(4) != _MAGIC:
                raise ValueError("not a network checkpoint")
            (n_layers,) = struct.unpack("<I", f.read(4))
            widths = struct.unpack(f"<{n_layers + 1}I", f.read(4 * (n_layers + 1)))
            (act_id,) = struct.unpack("<I", f.read(4))
            (multiscale,) = struct.unpack("<I", f.read(4))
            (has_scaling,) = struct.unpack("<B", f.read(1))
            lo = hi = None
            if has_scaling:
                d = widths[0]
                lo = tuple(np.frombuffer(f.read(8 * d), dtype="<f8"))
                hi = tuple(np.frombuffer(f.read(8 * d), dtype="<f8"))
            cfg = NetConfig(widths, _ACT_NAMES[act_id], multiscale, lo, hi)
            net = cls.init(cfg, seed=0)
            net.set_flat(np.frombuffer(f.read(), dtype="<f8").copy())
            return net

    # -- numpy evaluation (duplicate of the tape path, used as its oracle) ----

    def _features_numpy(self, x: np.ndarray):
        cfg = self.config
        x = np.atleast_2d(np.asarray(x, dtype=float))
        jac_scale = np.ones(cfg.d_in)
        if cfg.input_lo is not None:
            lo = np.asarray(cfg.input_lo)
            hi = np.asarray(cfg.input_hi)
            jac_scale = 1.0 / (hi - lo)
            x = (x - lo) * jac_scale
        if cfg.multiscale:
            k = np.arange(1, cfg.multiscale + 1)
            feats = x * k
            jac = (k * jac_scale[0])[None, :, None] * np.ones((x.shape[0], 1, 1))
        else:
            feats = x
            jac = np.broadcast_to(np.diag(jac_scale), (x.shape[0], cfg.d_in, cfg.d_in)).copy()
        return feats, jac

    def eval_numpy(self, x: np.ndarray) -> np.ndarray:
        """Batched value evaluation; returns (n, d_out)."""
        a, _ = self._features_numpy(x)
        n_layers = len(self.weights)
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            if li == n_layers - 1:
                a = z
            elif self.config.activation == "tanh":
                a = np.tanh(z)
            else:
                a = z / (1.0 + np.exp(-z))
        return a

    def eval_numpy_with_grad(self, x: np.ndarray):
        """Batched value and input gradient: (n, d_out), (n, d_out, d_in)."""
        a, jac = self._features_numpy(x)
        n_layers = len(self.weights)
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            t = np.einsum("oj,njd->nod", w, jac)
            if li == n_layers - 1:
                a, jac = z, t
            elif self.config.activation == "tanh":
                a = np.tanh(z)
                jac = (1.0 - a * a)[:, :, None] * t
            else:
                s = 1.0 / (1.0 + np.exp(-z))
                a = z * s
                jac = (s * (1.0 + z * (1.0 - s)))[:, :, None] * t
        return a, jac


@dataclass
class NetEval:
    """Value/gradient/Hessian tape nodes of one network evaluation.

    ``value[o]`` and ``grad[o][d]`` index outputs and input coordinates;
    ``hess[(i, j)][o]`` holds the (i, j) Hessian entry with i <= j (entries
    are symmetric: query via :meth:`hess_at`).
    """

    value: list[Var]
    grad: list[list[Var]] = field(default_factory=list)
    hess: dict[tuple[int, int], list[Var]] = field(default_factory=dict)

    def hess_at(self, i: int, j: int) -> list[Var]:
        return self.hess[(i, j) if i <= j else (j, i)]


class TapeNet:
    """Binding of an :class:`Fnn` to tape leaves.

    ``leaf_ids`` stores node ids in the same order as ``Fnn.flat()``, so
    trainer state vectors and checkpoints share one layout.
    """

    def __init__(self, fnn: Fnn, tape: Tape):
        self.fnn = fnn
        self.tape = tape
        self.W: list[list[list[Var]]] = []
        self.b: list[list[Var]] = []
        ids = []
        for w, bias in zip(fnn.weights, fnn.biases):
            rows = []
            for r in range(w.shape[0]):
                row = [tape.input(w[r, c]) for c in range(w.shape[1])]
                ids.extend(v.i for v in row)
                rows.append(row)
            self.W.append(rows)
            brow = [tape.input(bias[r]) for r in range(bias.size)]
            ids.extend(v.i for v in brow)
            self.b.append(brow)
        self.leaf_ids = np.asarray(ids, dtype=np.int64)

    def pull_values(self) -> None:
        """Copy current tape leaf values back into the numpy parameters."""
        self.fnn.set_flat(self.tape.values(self.leaf_ids))

    def eval(
        self,
        x: Sequence[Var],
        order: int = 0,
        hess_coords: Sequence[tuple[int, int]] | None = None,
    ) -> NetEval:
        """Record one evaluation at input nodes ``x``.

        order 0: values only; 1: + gradient; 2: + the requested Hessian
        entries (all of them when ``hess_coords`` is None).
        """
        cfg = self.fnn.config
        if order not in (0, 1, 2):
            raise ValueError("derivative order must be 0, 1 or 2")
        if len(x) != cfg.d_in:
            raise ValueError(f"expected {cfg.d_in} inputs, got {len(x)}")
        t = self.tape
        d = cfg.d_in
        if order == 2:
            coords = (
                [(i, j) for i in range(d) for j in range(i, d)]
                if hess_coords is None
                else [(min(i, j), max(i, j)) for (i, j) in hess_coords]
            )
        else:
            coords = []

        # feature layer: values, constant Jacobian, zero Hessian
        if cfg.input_lo is not None:
            scale = [1.0 / (hi - lo) for lo, hi in zip(cfg.input_lo, cfg.input_hi)]
            vals = [(xi - lo) * s for xi, lo, s in zip(x, cfg.input_lo, scale)]
        else:
            scale = [1.0] * d
            vals = list(x)
        if cfg.multiscale:
            k = cfg.multiscale
            vals = [vals[0] * float(i) for i in range(1, k + 1)]
            jac = [[t.const(float(i) * scale[0]) for i in range(1, k + 1)]]
        else:
            jac = [
                [t.const(scale[dd] if j == dd else 0.0) for j in range(d)]
                for dd in range(d)
            ]
            # jac[dd][j] = d feat_j / d x_dd
        hess: dict[tuple[int, int], list[Var] | None] = {c: None for c in coords}

        n_layers = len(self.W)
        act = cfg.activation
        for li in range(n_layers):
            W, b = self.W[li], self.b[li]
            last = li == n_layers - 1
            z = [t.dot(row, vals) + bi for row, bi in zip(W, b)]
            if order >= 1:
                tv = [[t.dot(row, jac[dd]) for row in W] for dd in range(d)]
            if order >= 2:
                uv = {
                    c: ([t.dot(row, hess[c]) for row in W] if hess[c] is not None else None)
                    for c in coords
                }
            if last:
                vals = z
                if order >= 1:
                    jac = tv
                if order >= 2:
                    hess = {
                        c: (uv[c] if uv[c] is not None else [t.const(0.0) for _ in z])
                        for c in coords
                    }
                break
            if act == "tanh":
                a = [tanh(zi) for zi in z]
                if order >= 1:
                    sp = [1.0 - ai * ai for ai in a]
                if order >= 2:
                    spp = [-2.0 * ai * spi for ai, spi in zip(a, sp)]
            else:  # swish: z*s with s = sigmoid(z)
                s = [sigmoid(zi) for zi in z]
                a = [zi * si for zi, si in zip(z, s)]
                if order >= 1:
                    sp = [si * (1.0 + zi * (1.0 - si)) for zi, si in zip(z, s)]
                if order >= 2:
                    spp = [
                        si * (1.0 - si) * (2.0 + zi * (1.0 - 2.0 * si))
                        for zi, si in zip(z, s)
                    ]
            new_hess: dict[tuple[int, int], list[Var] | None] = {}
            for c in coords:
                i, j = c
                ti, tj = tv[i], tv[j]
                if uv[c] is not None:
                    new_hess[c] = [
                        sppn * tin * tjn + spn * un
                        for sppn, spn, tin, tjn, un in zip(spp, sp, ti, tj, uv[c])
                    ]
                else:
                    new_hess[c] = [
                        sppn * tin * tjn for sppn, tin, tjn in zip(spp, ti, tj)
                    ]
            hess = new_hess
            if order >= 1:
                jac = [[spn * tn for spn, tn in zip(sp, tv[dd])] for dd in range(d)]
            vals = a

        result = NetEval(value=vals)
        if order >= 1:
            # reorder jac from [d][out] to [out][d]
            result.grad = [[jac[dd][o] for dd in range(d)] for o in range(cfg.d_out)]
        if order >= 2:
            result.hess = {c: hess[c] for c in coords}
        return result


# -- output transform registry ------------------------------------------------
# Model modules register transforms that reshape raw network outputs into
# solution surrogates (hard boundary constructions, indicator masks).  A
# transform receives the raw NetEval plus auxiliary scalars and must return a
# NetEval with correctly chained input derivatives.

TransformFn = Callable[[Tape, Sequence[Var], NetEval, dict], NetEval]

_TRANSFORMS: dict[str, TransformFn] = {}


def register_transform(name: str, fn: TransformFn) -> None:
    _TRANSFORMS[name] = fn


def apply_transform(name: str, tape: Tape, x: Sequence[Var], ev: NetEval, aux: dict) -> NetEval:
    if name not in _TRANSFORMS:
        raise KeyError(f"unknown transform {name!r}; registered: {sorted(_TRANSFORMS)}")
    return _TRANSFORMS[name](tape, x, ev, aux)

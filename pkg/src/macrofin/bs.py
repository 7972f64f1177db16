"""Capital-price equilibrium with a levered expert sector: the coupled
second-order ODE system for the price q and the reciprocal marginal value of
wealth, its pointwise capital-share solve, hard boundary constructions,
monotonicity penalties and the closed-form stationary wealth-share density.

State variable is the expert wealth share eta on (0, eta*], with eta* the
endogenous payout boundary.  The reciprocal transform th = 1/theta removes
the theta -> infinity singularity at eta = 0; every residual is written in
th-multiplied form so nothing divides by theta or th.

Formula functions take floats or tape Vars interchangeably (see
macrofin.tape); the tape path powers the training graphs, the float path the
reference computations and tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .net import NetEval, register_transform
from .tape import Var


@dataclass
class BsParams:
    """Model constants: productivities, discount rates, capital technology.

    The stationary wealth-share distribution exists iff
    2*(rho - r)*sigma^2 < Lambda^2 with Lambda = (a - a_low)/q_low -
    (delta - delta_low); violation raises at construction.
    """

    a: float = 0.11
    a_low: float = 0.05
    rho: float = 0.06
    # The household rate consistent with the reported lower price bound
    # 0.4862 (and with a non-constant marginal value of wealth: rho = r
    # forces theta identically 1 given the payout-boundary conditions).
    r: float = 0.05
    sigma: float = 0.025
    delta: float = 0.03
    delta_low: float = 0.08
    kappa: float = 10.0

    def __post_init__(self):
        if not (self.a > self.a_low):
            raise ValueError("expert productivity must exceed household productivity")
        if not (self.delta_low > self.delta):
            raise ValueError("household depreciation must exceed expert depreciation")
        if self.kappa <= 0:
            raise ValueError("investment loss factor must be positive")
        lam = self.big_lambda()
        if not (2.0 * (self.rho - self.r) * self.sigma**2 < lam * lam):
            raise ValueError("stationary distribution does not exist for these parameters")

    def big_lambda(self) -> float:
        return (self.a - self.a_low) / q_lower(self) - (self.delta - self.delta_low)


def phi(p: BsParams, x):
    """Investment technology Phi(x) = (x - 1)/kappa."""
    return (x - 1.0) * (1.0 / p.kappa)


def iota(p: BsParams, x):
    """Investment cost iota(x) = Phi(x) + kappa*Phi(x)^2/2."""
    f = phi(p, x)
    return f + 0.5 * p.kappa * f * f


def _q_lower_objective(p: BsParams, x: float) -> float:
    denom = p.r - (phi(p, x) - p.delta_low)
    if denom <= 0:
        return -math.inf
    return (p.a_low - iota(p, x)) / denom


def q_lower(p: BsParams, tol: float = 1e-12) -> float:
    """Lower price bound: max over x of (a_low - iota(x)) / (r - Phi(x) + delta_low).

    Golden-section search on (0, q_upper); the first-order condition is
    verified at the maximizer.
    """
    lo, hi = 1e-6, q_upper(p)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = _q_lower_objective(p, c), _q_lower_objective(p, d)
    while hi - lo > tol:
        if fc >= fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = _q_lower_objective(p, c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = _q_lower_objective(p, d)
    x = 0.5 * (lo + hi)
    h = 1e-6
    slope = (_q_lower_objective(p, x + h) - _q_lower_objective(p, x - h)) / (2 * h)
    if abs(slope) > 1e-4:
        raise RuntimeError(f"no interior maximum found (slope {slope:.3e} at {x:.6f})")
    return _q_lower_objective(p, x)


def q_upper(p: BsParams, tol: float = 1e-10) -> float:
    """Upper price bound: first root above 1 of (a - iota(x))/x + Phi(x) - delta - r.

    The residual dips negative between two roots and grows again for large x;
    a fine scan locates the first sign change before bisection.
    """

    def resid(x: float) -> float:
        return (p.a - iota(p, x)) / x + phi(p, x) - p.delta - p.r

    lo = 1.0
    if resid(lo) <= 0:
        lo = 0.25
    if resid(lo) <= 0:
        raise RuntimeError("no bracket for the upper price bound")
    hi = None
    for step in np.arange(lo + 0.01, 8.0, 0.01):
        if resid(step) < 0:
            hi = step
            break
        lo = step
    if hi is None:
        raise RuntimeError("no bracket for the upper price bound")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if resid(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class DegenerateStateError(ValueError):
    pass


def solve_psi_quadratic(p: BsParams, eta, q, qp, that, thatp):
    """Capital share from the indifference condition, via the quadratic root.

    In u = psi - eta the condition reads A u^2 + B u + C = 0 with
    A = th*X*q'^2, B = -(2 th X q q' + sigma^2 q^3 th'), C = th X q^2 and
    X = a - a_low + q (delta_low - delta).  The admissible root is the
    smaller one (the larger lies beyond the amplification singularity);
    roots above psi = 1 clamp to 1.
    Returns (psi, clamped).
    """
    x = p.a - p.a_low + q * (p.delta_low - p.delta)
    a2 = that * x * qp * qp
    b = -(2.0 * that * x * q * qp + p.sigma**2 * q**3 * thatp)
    c = that * x * q * q
    disc = b * b - 4.0 * a2 * c
    if disc < 0:
        raise DegenerateStateError(
            f"no real capital-share root (discriminant {disc:.3e} at eta={eta})"
        )
    u = 2.0 * c / (-b + math.sqrt(disc))
    psi = eta + u
    if psi > 1.0:
        return 1.0, True
    return psi, False


def psi_condition_lhs(p: BsParams, eta, q, qp, that, thatp, psi):
    """Indifference condition LHS (theta-hat form, multiplied by th > 0)."""
    u = psi - eta
    d = q - u * qp
    s_plus = p.sigma * q / d
    sig_eta_eta = u * s_plus
    # (a-a_low)/q + delta_low - delta + (sigma+sigma_q) * sigma_theta, with
    # sigma_theta*th = -th' * sig_eta_eta; divide the th factor out.
    return (
        ((p.a - p.a_low) / q + p.delta_low - p.delta) * that
        - s_plus * thatp * sig_eta_eta
    )


def solve_psi_bisection(p: BsParams, eta, q, qp, that, thatp, tol: float = 1e-12, max_iter: int = 200):
    """Capital share via bisection of the monotone indifference condition.

    Bracket (eta + 1e-12, eta + q/q' - 1e-12); same clamp at 1 as the
    quadratic solver.  Returns (psi, clamped).
    """
    if qp <= 0:
        raise DegenerateStateError(f"bisection requires q' > 0 (got {qp} at eta={eta})")
    lo = eta + 1e-12
    hi = eta + q / qp - 1e-12
    f_lo = psi_condition_lhs(p, eta, q, qp, that, thatp, lo)
    f_hi = psi_condition_lhs(p, eta, q, qp, that, thatp, hi)
    if f_lo * f_hi > 0:
        raise DegenerateStateError(
            f"indifference condition does not change sign on the bracket at eta={eta}"
        )
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = psi_condition_lhs(p, eta, q, qp, that, thatp, mid)
        if abs(f_mid) < tol:
            lo = hi = mid
            break
        if f_lo * f_mid <= 0:
            hi, f_hi = mid, f_mid
        else:
            lo, f_lo = mid, f_mid
    psi = 0.5 * (lo + hi)
    if psi > 1.0:
        return 1.0, True
    return psi, False


def vol_drift_terms(p: BsParams, eta, q, qp, that, thatp, psi, guard_denominator: bool = False):
    """Volatility and drift building blocks in th-multiplied form.

    Returns a dict with sig_eta_eta, sig_q, s_plus (= sigma + sigma_q),
    sig_th_that (= sigma_theta * th), mu_eta_eta_that, mu_q_that, mu_th.
    The denominator q - (psi - eta) q' must stay positive; the tape path may
    set ``guard_denominator`` to floor it at 1e-6 q (inactive at any
    admissible state, keeps early-training graphs finite).
    """
    u = psi - eta
    d = q - u * qp
    if guard_denominator:
        d = T.maximum(d, 1e-6 * q)
    elif not isinstance(d, Var) and d <= 0:
        raise DegenerateStateError(f"amplification singularity (denominator {d} at eta={eta})")
    s_plus = p.sigma * q / d
    sig_eta_eta = u * s_plus
    sig_q = s_plus - p.sigma
    sig_th_that = -thatp * sig_eta_eta
    iq = iota(p, q)
    mu_eta_eta_that = -u * s_plus * (that * s_plus + sig_th_that) + eta * that * (
        (p.a - iq) / q + (1.0 - psi) * (p.delta_low - p.delta)
    )
    mu_q_that = (
        that * (p.r - (p.a - iq) / q - phi(p, q) + p.delta - p.sigma * sig_q)
        - sig_th_that * s_plus
    )
    return {
        "sig_eta_eta": sig_eta_eta,
        "sig_q": sig_q,
        "s_plus": s_plus,
        "sig_th_that": sig_th_that,
        "mu_eta_eta_that": mu_eta_eta_that,
        "mu_q_that": mu_q_that,
        "mu_th": p.rho - p.r,
    }


def ode_residuals(p: BsParams, eta, q, qp, qpp, that, thatp, thatpp, psi, guard_denominator: bool = False):
    """Residuals of the two second-order equations in th-multiplied form.

    R_q  = q'' s2 th - 2 (mu_q_that q - q' mu_eta_eta_that)
    R_th = s2 (2 th'^2 - th th'') - 2 (mu_th th^2 + th' mu_eta_eta_that)
    with s2 = (sigma_eta * eta)^2.  Both vanish on exact solutions.
    """
    terms = vol_drift_terms(p, eta, q, qp, that, thatp, psi, guard_denominator)
    s2 = terms["sig_eta_eta"] * terms["sig_eta_eta"]
    r_q = qpp * s2 * that - 2.0 * (terms["mu_q_that"] * q - qp * terms["mu_eta_eta_that"])
    r_th = s2 * (2.0 * thatp * thatp - that * thatpp) - 2.0 * (
        terms["mu_th"] * that * that + thatp * terms["mu_eta_eta_that"]
    )
    return r_q, r_th


def hard_bc(eta, nq, nth, eta_star, c):
    """Boundary-exact solution surrogates.

    q  = (eta - eta*)^2 N_q + C
    th = eta (eta - eta*)^2 N_th - (eta/eta*)^2 + 2 eta/eta*
    identically satisfy q'(eta*) = 0, th(0) = 0, th(eta*) = 1, th'(eta*) = 0.
    ``nq``/``nth`` are (value, d1, d2) triples; returns two such triples.
    """
    nq0, nq1, nq2 = nq
    nt0, nt1, nt2 = nth
    dm = eta - eta_star
    dm2 = dm * dm
    q = dm2 * nq0 + c
    q1 = 2.0 * dm * nq0 + dm2 * nq1
    q2 = 2.0 * nq0 + 4.0 * dm * nq1 + dm2 * nq2

    t0 = eta * dm2
    t1 = dm2 + 2.0 * eta * dm
    t2 = 6.0 * eta - 4.0 * eta_star
    x = eta / eta_star  # exact 1.0 at eta == eta_star, keeps the identities exact
    p0 = -x * x + 2.0 * x
    p1 = (-2.0 * x + 2.0) / eta_star
    p2 = -2.0 / (eta_star * eta_star)
    th = t0 * nt0 + p0
    th1 = t1 * nt0 + t0 * nt1 + p1
    th2 = t2 * nt0 + 2.0 * t1 * nt1 + t0 * nt2 + p2
    return (q, q1, q2), (th, th1, th2)


def _hard_bc_transform(tape, x, ev: NetEval, aux: dict) -> NetEval:
    eta = x[0]
    order = 2 if ev.hess else (1 if ev.grad else 0)
    if order < 2:
        raise ValueError("hard boundary transform needs second input derivatives")
    h = ev.hess_at(0, 0)
    nq = (ev.value[0], ev.grad[0][0], h[0])
    nth = (ev.value[1], ev.grad[1][0], h[1])
    (q, q1, q2), (th, th1, th2) = hard_bc(eta, nq, nth, aux["eta_star"], aux["c"])
    return NetEval(
        value=[q, th],
        grad=[[q1], [th1]],
        hess={(0, 0): [q2, th2]},
    )


register_transform("bs_hard_bc", _hard_bc_transform)


def monotonicity_penalties(qp_samples, thatp_samples):
    """Mean-square of the negative parts of the sampled derivatives."""
    lq = float(np.mean(np.minimum(qp_samples, 0.0) ** 2)) if len(qp_samples) else 0.0
    lt = float(np.mean(np.minimum(thatp_samples, 0.0) ** 2)) if len(thatp_samples) else 0.0
    return lq, lt


# -- stationary density -------------------------------------------------------


@dataclass
class StationaryDensity:
    eta: np.ndarray
    f: np.ndarray
    norm_const: float


def stationary_density_from_values(
    eta_fine: np.ndarray,
    mu_eta_eta_fine: np.ndarray,
    sig_eta_eta_fine: np.ndarray,
    n_out: int,
) -> StationaryDensity:
    """Zero-flux stationary density from drift/volatility samples.

    ``eta_fine`` must be a uniform grid whose last point is eta* and whose
    points contain the output grid eta* * (1..n)/n as every ``refine``-th
    entry.  Q = (2 mu_eta_eta - d(sig2)/deta)/sig2 uses central differences
    (one-sided at the ends); f = A exp(-int_eta^{eta*} Q) by cumulative
    trapezoid on the fine grid, normalized to unit mass on the output grid.
    """
    sig2 = np.asarray(sig_eta_eta_fine, dtype=float) ** 2
    if np.any(sig2 <= 0):
        k = int(np.flatnonzero(sig2 <= 0)[0])
        raise DegenerateStateError(f"degenerate diffusion at eta={eta_fine[k]:.6g}")
    h = eta_fine[1] - eta_fine[0]
    dsig2 = np.gradient(sig2, h, edge_order=2)
    q_fn = (2.0 * np.asarray(mu_eta_eta_fine, dtype=float) - dsig2) / sig2

    # I(eta) = int_eta^{eta*} Q, cumulative trapezoid from the right end
    seg = 0.5 * h * (q_fn[1:] + q_fn[:-1])
    tail = np.concatenate([[0.0], np.cumsum(seg[::-1])])[::-1]
    log_f = -tail
    log_f -= log_f.max()
    f_fine = np.exp(log_f)

    refine = (eta_fine.size - 1) // (n_out - 1) if n_out > 1 else 1
    out_idx = np.arange(0, eta_fine.size, refine)
    eta_out = eta_fine[out_idx]
    f_out = f_fine[out_idx]
    mass = np.trapezoid(f_out, eta_out)
    a_norm = 1.0 / mass
    return StationaryDensity(eta=eta_out, f=f_out * a_norm, norm_const=a_norm)


def stationary_density(
    mu_fn,
    sig_fn,
    eta_star: float,
    n: int = 2000,
    refine: int = 64,
) -> StationaryDensity:
    """Density on the uniform grid eta* * (1..n)/n with internal refinement.

    ``mu_fn``/``sig_fn`` map an eta array to mu_eta*eta and sigma_eta*eta.
    The fine integration grid keeps the output points as a subset, so the
    near-origin 1/eta behaviour of Q is integrated accurately.
    """
    eta_lo = eta_star / n
    n_fine = (n - 1) * refine + 1
    eta_fine = np.linspace(eta_lo, eta_star, n_fine)
    dens = stationary_density_from_values(eta_fine, mu_fn(eta_fine), sig_fn(eta_fine), n)
    return dens


def density_flux(eta: np.ndarray, f: np.ndarray, mu_eta_eta: np.ndarray, sig_eta_eta: np.ndarray) -> np.ndarray:
    """Probability flux J = -mu_eta*eta*f + d(sig2*f)/deta / 2 on interior points."""
    sig2f = sig_eta_eta**2 * f
    h = eta[1] - eta[0]
    dsig2f = (sig2f[2:] - sig2f[:-2]) / (2 * h)
    return -mu_eta_eta[1:-1] * f[1:-1] + 0.5 * dsig2f


def moment_a_target(p: BsParams, dens: StationaryDensity, psi_grid: np.ndarray, a=None) -> float:
    """Average productivity: int [psi a + (1 - psi) a_low] f deta."""
    a_val = p.a if a is None else a
    integrand = (psi_grid * a_val + (1.0 - psi_grid) * p.a_low) * dens.f
    return float(np.trapezoid(integrand, dens.eta))


def moment_vol_target(dens: StationaryDensity, q_grid: np.ndarray) -> float:
    """Price dispersion: sqrt(int (q - qbar_m)^2 f) / qbar_m, qbar_m = int q f."""
    qbar = float(np.trapezoid(q_grid * dens.f, dens.eta))
    var = float(np.trapezoid((q_grid - qbar) ** 2 * dens.f, dens.eta))
    return math.sqrt(var) / qbar

"""Shooting reference solver for the capital-price equilibrium ODE system.

Independent of the network path: integrates the (q, q', theta'/theta) system
in the log state variable t = ln(eta) from eta0 = 1e-8, where the power-law
asymptotics pin the initial log-derivative of theta, and bisects on the
initial slope q'(eta0) until the payout boundary conditions
q'(eta*) = theta'(eta*) = 0 hold at a common eta*.

theta itself never enters the dynamics (the system is homogeneous in theta);
its log is accumulated alongside and rescaled so theta(eta*) = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from ..bs import BsParams, iota, phi, q_lower, q_upper

ETA0 = 1e-8


def beta_asymptote(p: BsParams) -> float:
    """Power-law exponent of theta ~ eta^-beta at the origin.

    Derived by matching the asymptotic expansions of both equations: with
    sig_hat = Lambda/(beta sigma) and mu_hat = beta sig_hat^2 - sig_hat sigma
    + K, K = Lambda + r + delta_low - Phi(q_low),
        beta (beta + 1) sig_hat^2 = 2 (rho - r) + 2 beta mu_hat.
    """
    lam = p.big_lambda()
    ql = q_lower(p)
    k = lam + p.r + p.delta_low - phi(p, ql)

    def g(beta: float) -> float:
        sig_hat = lam / (beta * p.sigma)
        mu_hat = beta * sig_hat**2 - sig_hat * p.sigma + k
        return beta * (beta + 1.0) * sig_hat**2 - 2.0 * (p.rho - p.r) - 2.0 * beta * mu_hat

    return brentq(g, 1e-3, 50.0, xtol=1e-13)


def _psi_from_state(p: BsParams, eta, q, qp, lam, tol=1e-13):
    """Capital share from the indifference condition given theta'/theta.

    Bisection on u = psi - eta over (0, q/q'); LHS is decreasing in u.
    Clamps at psi = 1.
    """
    lam_q = (p.a - p.a_low) / q + p.delta_low - p.delta

    def lhs(u):
        d = q - u * qp
        s_plus = p.sigma * q / d
        return lam_q + lam * u * s_plus * s_plus

    hi = (q / qp if qp > 0 else 1e6) * (1.0 - 1e-12)
    if lhs(hi) > 0:
        u = hi
    else:
        lo = 0.0
        u = 0.5 * hi
        for _ in range(200):
            if lhs(u) > 0:
                lo = u
            else:
                hi = u
            u = 0.5 * (lo + hi)
            if hi - lo < tol * max(1.0, hi):
                break
    psi = eta + u
    return (1.0, True) if psi > 1.0 else (psi, False)


def _rhs(p: BsParams, t: float, y: np.ndarray) -> np.ndarray:
    """Dynamics of (q, w, m, I) in t = ln(eta).

    w = eta q', m = eta theta'/theta, I = int m dt = ln theta + const.
    """
    eta = math.exp(t)
    q, w, m = y[0], y[1], y[2]
    qp = w / eta
    lam = m / eta
    psi, _ = _psi_from_state(p, eta, q, qp, lam)
    u = psi - eta
    d = q - u * qp
    if d <= 0 or q <= 0:
        raise FloatingPointError(f"amplification singularity at eta={eta:.3e}")
    s_plus = p.sigma * q / d
    sig_eta_eta = u * s_plus
    sig_q = s_plus - p.sigma
    sig_th = lam * sig_eta_eta
    iq = iota(p, q)
    mu_q = p.r - (p.a - iq) / q - phi(p, q) + p.delta - p.sigma * sig_q - sig_th * s_plus
    mu_eta_eta = -u * s_plus * (s_plus + sig_th) + eta * (
        (p.a - iq) / q + (1.0 - psi) * (p.delta_low - p.delta)
    )
    s2 = sig_eta_eta * sig_eta_eta
    qpp = 2.0 * (mu_q * q - qp * mu_eta_eta) / s2
    lam_prime = 2.0 * ((p.rho - p.r) - lam * mu_eta_eta) / s2 - lam * lam
    eta2 = eta * eta
    return np.array([w, w + eta2 * qpp, m + eta2 * lam_prime, m])


@dataclass
class ShootingSolution:
    eta: np.ndarray
    q: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    eta_star: float
    tolerance: float
    params: BsParams | None = None
    dense: object = None
    log_theta_star: float = 0.0

    def as_columns(self) -> dict[str, np.ndarray]:
        return {"eta": self.eta, "q": self.q, "theta": self.theta, "psi": self.psi}

    def state_at(self, eta: np.ndarray):
        """(q, q', theta'/theta, psi) at arbitrary eta inside (0, eta*]."""
        eta = np.asarray(eta, dtype=float)
        ts = np.minimum(np.log(eta), math.log(self.eta_star))
        ys = self.dense(ts)
        q = ys[0]
        qp = ys[1] / eta
        lam = ys[2] / eta
        psi = np.array(
            [_psi_from_state(self.params, e, qq, pp, ll)[0] for e, qq, pp, ll in zip(eta, q, qp, lam)]
        )
        return q, qp, lam, psi

    def drift_vol_at(self, eta: np.ndarray):
        """(mu_eta*eta, sigma_eta*eta) along the solution."""
        p = self.params
        q, qp, lam, psi = self.state_at(eta)
        u = psi - eta
        d = q - u * qp
        s_plus = p.sigma * q / d
        sig_eta_eta = u * s_plus
        sig_th = lam * sig_eta_eta
        iq = iota(p, q)
        mu_eta_eta = -u * s_plus * (s_plus + sig_th) + eta * (
            (p.a - iq) / q + (1.0 - psi) * (p.delta_low - p.delta)
        )
        return mu_eta_eta, sig_eta_eta


def _integrate(p: BsParams, w0: float, beta: float, ql: float, rtol: float):
    t0 = math.log(ETA0)
    y0 = np.array([ql, w0, -beta, 0.0])

    def m_zero(t, y):
        return y[2]

    m_zero.terminal = True
    m_zero.direction = 1.0

    def w_zero(t, y):
        return y[1]

    w_zero.terminal = True
    w_zero.direction = -1.0

    try:
        sol = solve_ivp(
            lambda t, y: _rhs(p, t, y),
            (t0, math.log(0.95)),
            y0,
            method="RK45",
            rtol=rtol,
            atol=1e-12,
            events=[m_zero, w_zero],
            dense_output=True,
            max_step=0.25,
        )
    except FloatingPointError:
        return None, "singular"
    if sol.t_events[0].size:  # theta' reached zero first
        return sol, "m_zero"
    if sol.t_events[1].size:  # q' collapsed first
        return sol, "w_zero"
    return sol, "no_event"


def _shooting_residual(p: BsParams, w0: float, beta: float, ql: float, rtol: float) -> float:
    """Signed residual for the bisection on the initial slope.

    Positive when the slope is too large (q' still positive when theta'
    vanishes, or the integration blows up), negative when q' collapses
    before theta' does.
    """
    sol, outcome = _integrate(p, w0, beta, ql, rtol)
    if outcome == "singular" or outcome == "no_event":
        return 1.0
    if outcome == "w_zero":
        return -1.0 - float(sol.y_events[1][0][2])  # more negative the further m is from 0
    return float(sol.y_events[0][0][1])  # w at the m = 0 event


def ode_shoot_bs(p: BsParams, tol: float = 1e-10, n_grid: int = 2000, rtol: float = 1e-9) -> ShootingSolution:
    """March the equilibrium system out of the origin and locate eta*.

    Bisection on w0 = eta0 * q'(eta0); the boundary eta* is the first point
    where theta' = 0, accepted when |q'| there is below tolerance in the
    w = eta q' variable.
    """
    beta = beta_asymptote(p)
    ql = q_lower(p)

    lo, hi = 1e-12, 1.0
    r_lo = _shooting_residual(p, lo, beta, ql, rtol)
    r_hi = _shooting_residual(p, hi, beta, ql, rtol)
    if r_lo > 0 or r_hi < 0:
        raise RuntimeError(f"shooting bracket not found (residuals {r_lo:.3e}, {r_hi:.3e})")
    for _ in range(200):
        mid = math.sqrt(lo * hi)  # log-scale bisection
        r_mid = _shooting_residual(p, mid, beta, ql, rtol)
        if r_mid > 0:
            hi = mid
        else:
            lo = mid
        if hi / lo - 1.0 < 1e-14 or abs(r_mid) < tol:
            break

    w0 = math.sqrt(lo * hi)
    sol, outcome = _integrate(p, w0, beta, ql, rtol)
    if outcome == "w_zero":
        # accept the q'-vanishing point; at convergence both events coincide
        t_star = float(sol.t_events[1][0])
        y_star = sol.y_events[1][0]
    elif outcome == "m_zero":
        t_star = float(sol.t_events[0][0])
        y_star = sol.y_events[0][0]
    else:
        raise RuntimeError("integration lost the boundary after bisection")
    eta_star = math.exp(t_star)

    eta = eta_star * np.arange(1, n_grid + 1) / n_grid
    ts = np.log(eta)
    ys = sol.sol(np.minimum(ts, t_star))
    q = ys[0]
    log_theta = ys[3] - y_star[3]
    theta = np.exp(log_theta)
    qp = ys[1] / eta
    lam = ys[2] / eta
    psi = np.array([_psi_from_state(p, e, qq, pp, ll)[0] for e, qq, pp, ll in zip(eta, q, qp, lam)])

    return ShootingSolution(
        eta=eta,
        q=q,
        theta=theta,
        psi=psi,
        eta_star=eta_star,
        tolerance=max(tol, rtol),
        params=p,
        dense=sol.sol,
        log_theta_star=float(y_star[3]),
    )

"""Banking-industry equilibrium: closed-form labor/profit/payout decisions,
value-function and stationary-distribution residuals, entry machinery and
moment integrals.

State is (equity e, productivity z) on [e_min, e_max] x [z_lo, z_hi] with an
exit obstacle (value floor e) and mean-reverting z between reflecting
barriers.  The loan spread solves a demand relation whose aggregate-loan
input scales linearly in the entry mass, so the mass is eliminated after
training (``eliminate_m``).

All decision formulas run on floats or tape Vars; the parameters that
estimation runs co-train (loan spread, labor share, fixed cost) are passed
explicitly so callers can plug in tape expressions.

A note on the entrant density: the draw is a truncated normal in z times a
uniform in equity below e_bar.  The uniform factor is normalized on
[e_min, e_bar] (the part of the support inside the state space), which makes
the density integrate to one over the computational domain and keeps the
free-entry and source terms exactly consistent with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .net import NetEval, register_transform

# Demand-curve constant and wage reproducing the reference endogenous values
# (loan spread 0.043337 - 0.03, entry mass 0.2194) at the default grid; see
# scripts/calibrate_bank.py for the derivation.  Overridable like any field.
CALIBRATED_WAGE = 1.0
CALIBRATED_BETA_DEMAND = 0.05


@dataclass
class BankParams:
    kappa: float = 0.005        # equity payout rate
    alpha: float = 0.3          # labor share
    phi_lev: float = 10.0       # leverage cap
    r: float = 0.03             # benchmark rate
    c_f: float = 0.03           # fixed operating cost
    c_e: float = 0.1            # entry cost
    z_lo: float = 0.2
    z_hi: float = 10.0
    z_mean: float = 5.0
    e_min: float = 0.01
    e_max: float = 1.2
    theta0: float = 0.005       # z-drift coefficient: mu_z = -theta0 (z - z_mean)
    sigma_z: float = 0.08
    d0: float = 1.0             # demand-curve constant
    sigma_psi: float = (10.0 - 0.2) / 4.0
    e_bar: float = 0.15         # entrant equity cap
    m_bar: float = 0.1          # entry-mass scale
    beta_entry: float = 1e3     # entry elasticity
    epsilon: float = 1.0        # demand exponent
    wage: float = CALIBRATED_WAGE
    beta_demand: float = CALIBRATED_BETA_DEMAND

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("labor share must lie in (0, 1)")
        if self.phi_lev <= 0:
            raise ValueError("leverage cap must be positive")
        if not (self.z_lo < self.z_mean < self.z_hi):
            raise ValueError("productivity mean must lie inside its bounds")
        if not (self.e_min < self.e_max):
            raise ValueError("equity bounds are inverted")
        if self.epsilon <= 0:
            raise ValueError("demand exponent must be positive")

    def mu_z(self, z):
        return -self.theta0 * (z - self.z_mean)


class SpreadError(ValueError):
    """Loan spread non-positive: the decision problem is degenerate."""


def labor_candidates(p: BankParams, e, z, rl, alpha=None, w=None, guard_spread: bool = False):
    """Interior and leverage-capped labor candidates.

    interior:  ((rl - r) z alpha / w)^(1/(1-alpha))
    capped:    (phi e / z)^(1/alpha)
    """
    alpha = p.alpha if alpha is None else alpha
    w = p.wage if w is None else w
    spread = rl - p.r
    if guard_spread:
        spread = T.maximum(spread, 1e-8)
    elif not isinstance(spread, T.Var) and spread <= 0:
        raise SpreadError(f"loan spread must be positive (got {spread})")
    interior = T.power(spread * z * alpha / w, 1.0 / (1.0 - alpha))
    capped = T.power(p.phi_lev * e / z, 1.0 / alpha)
    return interior, capped


def optimal_labor(p: BankParams, e, z, rl, alpha=None, w=None):
    """Optimal labor per market (loans = deposits by symmetry).

    Returns (l_star, unconstrained) where the flag marks the interior branch;
    ties count as constrained.
    """
    interior, capped = labor_candidates(p, e, z, rl, alpha, w)
    if interior < capped:
        return interior, True
    return capped, False


def decision_pieces(p: BankParams, e, z, rl, alpha=None, w=None, c_f=None, guard_spread: bool = False):
    """Labor, profit, payout and equity drift at one state.

    Works on floats or tape Vars; the payout is zero exactly on the capped
    branch, so the unconstrained indicator multiplying it is redundant and
    omitted (max(kappa*(phi e - f), 0) with f = phi e).
    """
    alpha_v = p.alpha if alpha is None else alpha
    w_v = p.wage if w is None else w
    c_f_v = p.c_f if c_f is None else c_f
    interior, capped = labor_candidates(p, e, z, rl, alpha_v, w_v, guard_spread)
    l_star = T.minimum(interior, capped)
    f_zl = z * T.power(l_star, alpha_v)
    spread = rl - p.r
    if guard_spread:
        spread = T.maximum(spread, 1e-8)
    pi_star = 2.0 * spread * f_zl + e * p.r - 2.0 * w_v * l_star - c_f_v
    zeta = T.maximum(p.kappa * (p.phi_lev * e - f_zl), 0.0)
    mu_e = pi_star - zeta
    return {
        "l_star": l_star,
        "f_zl": f_zl,
        "pi_star": pi_star,
        "zeta": zeta,
        "mu_e": mu_e,
    }


def profit(p: BankParams, e, z, rl, alpha=None, w=None, c_f=None):
    return decision_pieces(p, e, z, rl, alpha, w, c_f)["pi_star"]


def payout(p: BankParams, e, z, rl, alpha=None, w=None):
    return decision_pieces(p, e, z, rl, alpha, w)["zeta"]


def d_mu_e_branches(p: BankParams, e, z, rl, l_star, alpha=None, w=None):
    """Equity-drift derivative d(mu_e)/de on each branch.

    interior branch: r - kappa*phi   (labor independent of e; payout slope)
    capped branch:   2 (rl - r) phi + r - 2 w l / (alpha e)
    """
    alpha_v = p.alpha if alpha is None else alpha
    w_v = p.wage if w is None else w
    unc = p.r - p.kappa * p.phi_lev
    con = 2.0 * (rl - p.r) * p.phi_lev + p.r - 2.0 * w_v * l_star / (alpha_v * e)
    return unc, con


def hjb_residual(p: BankParams, e, z, v, v_e, v_z, v_zz, pieces):
    """r v - max(continuation, r e) with the closed-form controls.

    continuation = pi + zeta + mu_e v_e + mu_z v_z + sigma_z^2 v_zz / 2,
    using pi (1 + v_e) + (1 - v_e) zeta = pi + zeta + mu_e v_e.
    """
    cont = (
        pieces["pi_star"]
        + pieces["zeta"]
        + pieces["mu_e"] * v_e
        + p.mu_z(z) * v_z
        + 0.5 * p.sigma_z**2 * v_zz
    )
    return p.r * v - T.maximum(cont, p.r * e)


def kfe_residual(p: BankParams, e, z, g, g_e, g_z, g_zz, mu_e, d_mu_e, psi_val, m=1.0):
    """Stationary forward-equation residual, product rule expanded.

    -(mu_z g)_z - (mu_e g)_e + (sigma_z^2 g)_zz / 2 + m psi
      = theta0 g - mu_z g_z - d_mu_e g - mu_e g_e + sigma_z^2 g_zz / 2 + m psi
    (valid only on the survival region; the caller masks exit points).
    """
    return (
        p.theta0 * g
        - p.mu_z(z) * g_z
        - d_mu_e * g
        - mu_e * g_e
        + 0.5 * p.sigma_z**2 * g_zz
        + m * psi_val
    )


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def entrant_density(p: BankParams, e, z):
    """Entry draw density: truncated normal in z, uniform in equity.

    Normalized to unit mass over the state domain [e_min, e_bar] x
    [z_lo, z_hi]; zero for e >= e_bar or z outside its bounds.  Vectorizes
    over numpy inputs.
    """
    e = np.asarray(e, dtype=float)
    z = np.asarray(z, dtype=float)
    z_span = _norm_cdf((p.z_hi - p.z_mean) / p.sigma_psi) - _norm_cdf(
        (p.z_lo - p.z_mean) / p.sigma_psi
    )
    pdf_z = np.exp(-((z - p.z_mean) ** 2) / (2.0 * p.sigma_psi**2)) / math.sqrt(
        2.0 * math.pi * p.sigma_psi**2
    )
    dens = pdf_z / (z_span * (p.e_bar - p.e_min))
    mask = (e < p.e_bar) & (e >= 0.0) & (z >= p.z_lo) & (z <= p.z_hi)
    out = np.where(mask, dens, 0.0)
    return out if out.ndim else float(out)


def trapezoid_weights(x: np.ndarray) -> np.ndarray:
    """Composite trapezoid weights for a (possibly non-uniform) grid."""
    w = np.zeros_like(x, dtype=float)
    dx = np.diff(x)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    return w


def grid_integral(values: np.ndarray, e_grid: np.ndarray, z_grid: np.ndarray) -> float:
    """Composite-trapezoid double integral of values[i_e, i_z]."""
    we = trapezoid_weights(e_grid)
    wz = trapezoid_weights(z_grid)
    return float(we @ values @ wz)


def free_entry_residual(p: BankParams, v_grid: np.ndarray, e_grid: np.ndarray, z_grid: np.ndarray) -> float:
    """Expected entry value minus the entry cost: integral of v psi - c_e."""
    ee = e_grid[:, None]
    zz = z_grid[None, :]
    return grid_integral(v_grid * entrant_density(p, ee, zz), e_grid, z_grid) - p.c_e


def estimate_ce(p: BankParams, v_grid: np.ndarray, e_grid: np.ndarray, z_grid: np.ndarray) -> float:
    """Post-hoc entry-cost estimate: integral of v psi."""
    return free_entry_residual(p, v_grid, e_grid, z_grid) + p.c_e


class InfeasibleEquilibriumError(ValueError):
    pass


def eliminate_m(nl: float, rl: float, p: BankParams) -> float:
    """Entry mass from the demand relation: m = (beta/(rl - r) - D0) / NL.

    ``nl`` is the aggregate loan integral of the unit-mass distribution; the
    final density is m times it.
    """
    if rl <= p.r:
        raise SpreadError(f"loan spread must be positive (got {rl - p.r})")
    numer = p.beta_demand / (rl - p.r) - p.d0
    if nl <= 0 or numer <= 0:
        raise InfeasibleEquilibriumError(
            f"infeasible equilibrium: unit loans {nl:.4g}, demand residual {numer:.4g}"
        )
    return numer / nl


def moments(
    p: BankParams,
    g_grid: np.ndarray,
    e_grid: np.ndarray,
    z_grid: np.ndarray,
    rl: float,
    alpha: float | None = None,
    w: float | None = None,
) -> dict[str, float]:
    """Cross-sectional moments under the positized, normalized density.

    g' = max(g, 0) / integral(max(g, 0)); returns the average productivity,
    labor, equity and leverage ratio f(z, l*)/e.
    """
    alpha = p.alpha if alpha is None else alpha
    w = p.wage if w is None else w
    gpos = np.maximum(g_grid, 0.0)
    mass = grid_integral(gpos, e_grid, z_grid)
    if mass <= 0:
        raise InfeasibleEquilibriumError("degenerate density: no positive mass")
    gn = gpos / mass
    ee = e_grid[:, None]
    zz = z_grid[None, :]
    spread = rl - p.r
    if spread <= 0:
        raise SpreadError(f"loan spread must be positive (got {spread})")
    interior = (spread * zz * alpha / w) ** (1.0 / (1.0 - alpha))
    capped = (p.phi_lev * ee / zz) ** (1.0 / alpha)
    l_star = np.minimum(interior, capped)
    f_zl = zz * l_star**alpha
    return {
        "z_target": grid_integral(zz * gn, e_grid, z_grid),
        "l_target": grid_integral(l_star * gn, e_grid, z_grid),
        "e_target": grid_integral(ee * gn, e_grid, z_grid),
        "lev_target": grid_integral(f_zl / ee * gn, e_grid, z_grid),
    }


def aggregate_loans(
    p: BankParams,
    g_grid: np.ndarray,
    e_grid: np.ndarray,
    z_grid: np.ndarray,
    rl: float,
    alpha: float | None = None,
    w: float | None = None,
) -> float:
    """Aggregate loan volume: integral of g f(z, l*)."""
    alpha = p.alpha if alpha is None else alpha
    w = p.wage if w is None else w
    ee = e_grid[:, None]
    zz = z_grid[None, :]
    interior = ((rl - p.r) * zz * alpha / w) ** (1.0 / (1.0 - alpha))
    capped = (p.phi_lev * ee / zz) ** (1.0 / alpha)
    f_zl = zz * np.minimum(interior, capped) ** alpha
    return grid_integral(g_grid * f_zl, e_grid, z_grid)


def soft_entry_mass(p: BankParams, v_grid: np.ndarray, e_grid: np.ndarray, z_grid: np.ndarray) -> float:
    """Diagnostic entry mass m_bar exp(beta_M (int v psi - c_e)), exponent clipped."""
    gap = free_entry_residual(p, v_grid, e_grid, z_grid)
    return p.m_bar * math.exp(min(max(p.beta_entry * gap, -60.0), 60.0))


def cdf_of_g(g_grid: np.ndarray, e_grid: np.ndarray, z_grid: np.ndarray) -> np.ndarray:
    """Two-dimensional cumulative trapezoid integral up to each (e, z)."""
    we = trapezoid_weights(e_grid)
    wz = trapezoid_weights(z_grid)
    # cumulative trapezoid along each axis: running sums of panel averages
    inner = np.zeros_like(g_grid)
    avg_e = 0.5 * (g_grid[1:, :] + g_grid[:-1, :]) * np.diff(e_grid)[:, None]
    inner[1:, :] = np.cumsum(avg_e, axis=0)
    out = np.zeros_like(g_grid)
    avg_z = 0.5 * (inner[:, 1:] + inner[:, :-1]) * np.diff(z_grid)[None, :]
    out[:, 1:] = np.cumsum(avg_z, axis=1)
    return out


def _indicator_mask_transform(tape, x, ev: NetEval, aux: dict) -> NetEval:
    """Multiply outputs (and derivatives) by a refreshable 0/1 const node."""
    mask = aux["mask"]
    out = NetEval(value=[mask * v for v in ev.value])
    if ev.grad:
        out.grad = [[mask * gg for gg in row] for row in ev.grad]
    if ev.hess:
        out.hess = {c: [mask * hh for hh in hs] for c, hs in ev.hess.items()}
    return out


register_transform("indicator_mask", _indicator_mask_transform)

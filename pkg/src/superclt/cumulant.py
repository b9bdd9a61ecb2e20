"""Nonlinear cumulant semigroup V_t(f) and exact Laplace functionals of X and Y.

V solves dV/dt = L V - beta * psi0(V), V_0 = f, which is the differential form of
the mild equation V_t + int_0^t T_s[beta psi0(V_{t-s})] ds = T_t f. The mild-form
residual is checked after every solve. The immigration exponent int_0^t phi(V_s) ds
is carried as an extra ODE component so it shares the solver's error control.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .model import Scenario
from .spectral import SpectralSystem, semigroup_apply

RTOL = 1e-10
ATOL = 1e-10
RESIDUAL_TOL = 1e-7


class StiffnessError(ArithmeticError):
    pass


@dataclass(frozen=True)
class CumulantSolution:
    f: np.ndarray
    grid: np.ndarray
    V: np.ndarray            # (len(grid), n)
    I: np.ndarray            # int_0^t phi(V_s) ds at each grid time
    nfev: int
    residual: float          # sup-norm mild-form residual at grid[-1]

    def at(self, t: float) -> np.ndarray:
        idx = np.nonzero(np.isclose(self.grid, t, rtol=0, atol=1e-14))[0]
        if idx.size == 0:
            raise KeyError(f"t={t} is not on the solution grid")
        return self.V[idx[0]]


def _rhs_factory(scenario: Scenario):
    L = scenario.L
    br = scenario.branching
    beta = br.beta
    im = scenario.immigration
    n = scenario.n

    def rhs(_t, y):
        v = y[:n]
        out = np.empty_like(y)
        out[:n] = L @ v - beta * br.psi0(v)
        out[n] = im.phi(v)
        return out

    return rhs


def solve_cumulant(scenario: Scenario, sys: SpectralSystem, f, t_max: float, grid=None,
                   allow_signed: bool = False, check_residual: bool = True,
                   atol: float = ATOL) -> CumulantSolution:
    """Solve for V_t(f) on ``grid`` (default: [0, t_max]).

    ``allow_signed`` admits small signed f, used only for finite-difference
    derivatives at theta = 0 where the equation extends analytically. ``atol`` must
    shrink with f for tiny f; the residual check is scaled by atol / ATOL as well.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (scenario.n,):
        raise ValueError(f"f has shape {f.shape}, expected ({scenario.n},)")
    if not allow_signed and np.any(f < 0):
        raise ValueError("f must be nonnegative")
    if t_max < 0:
        raise ValueError("t_max must be nonnegative")
    grid = np.array([0.0, t_max] if grid is None else grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) < 0) or grid[0] < 0 or grid[-1] > t_max + 1e-15:
        raise ValueError("grid must be nondecreasing within [0, t_max]")
    n = scenario.n
    y0 = np.concatenate([f, [0.0]])
    if t_max == 0 or not np.any(f != 0):
        V = np.tile(f, (grid.size, 1))
        return CumulantSolution(f, grid, V, np.zeros(grid.size), 0, 0.0)
    sol = integrate.solve_ivp(_rhs_factory(scenario), (0.0, t_max), y0, method="DOP853",
                              t_eval=grid, rtol=RTOL, atol=atol, dense_output=check_residual)
    if sol.status != 0:
        raise StiffnessError(f"cumulant solver failed at t={sol.t[-1] if sol.t.size else 0:.6g}: {sol.message}")
    V = sol.y[:n].T.copy()
    I = sol.y[n].copy()
    resid, scale = (_mild_residual(scenario, sys, f, t_max, sol.sol, floor=atol / ATOL) if check_residual
                    else (math.nan, 1.0))
    if check_residual and resid > RESIDUAL_TOL * scale:
        raise StiffnessError(f"mild-form residual {resid:.3g} exceeds {RESIDUAL_TOL:g} x {scale:.3g}")
    return CumulantSolution(f, grid, V, I, int(sol.nfev), resid)


def _mild_residual(scenario: Scenario, sys: SpectralSystem, f, t: float, dense,
                   floor: float = 1.0) -> tuple[float, float]:
    """sup_x |V_t + int_0^t T_s[beta psi0(V_{t-s})] ds - T_t f| and the size of its largest term."""
    n = scenario.n
    br = scenario.branching

    def integrand(s):
        v = dense(t - s)[:n]
        return semigroup_apply(sys, s, br.beta * br.psi0(v))

    val, _ = integrate.quad_vec(integrand, 0.0, t, epsabs=1e-12 * floor, epsrel=1e-11)
    Tf = semigroup_apply(sys, t, f)
    vt = dense(t)[:n]
    r = vt + val - Tf
    scale = max(floor, float(np.max(np.abs(vt))), float(np.max(np.abs(Tf))), float(np.max(np.abs(val))))
    return float(np.max(np.abs(r))), scale


def immigration_integral_quad(scenario: Scenario, sol_dense, t: float, n: int) -> float:
    """int_0^t phi(V_s) ds by adaptive quadrature on a dense solution (cross-check path)."""
    val, _ = integrate.quad(lambda s: scenario.immigration.phi(sol_dense(s)[:n]), 0.0, t,
                            epsabs=1e-12, epsrel=1e-11, limit=200)
    return val


def laplace_X(scenario: Scenario, sys: SpectralSystem, f, t: float, mu=None,
              allow_signed: bool = False) -> float:
    """E_mu exp(-<f, X_t>) for the process without immigration."""
    mu = scenario.mu0 if mu is None else np.asarray(mu, dtype=float)
    if t == 0:
        return math.exp(-float(mu @ np.asarray(f, dtype=float)))
    sol = solve_cumulant(scenario, sys, f, t, allow_signed=allow_signed)
    return math.exp(-float(mu @ sol.V[-1]))


def laplace_Y(scenario: Scenario, sys: SpectralSystem, f, t: float, mu=None,
              allow_signed: bool = False, atol: float = ATOL) -> float:
    """E_mu exp(-<f, Y_t>) including immigration."""
    mu = scenario.mu0 if mu is None else np.asarray(mu, dtype=float)
    if t == 0:
        return math.exp(-float(mu @ np.asarray(f, dtype=float)))
    sol = solve_cumulant(scenario, sys, f, t, allow_signed=allow_signed, atol=atol)
    return math.exp(-float(mu @ sol.V[-1]) - float(sol.I[-1]))


def laplace_Y_grid(scenario: Scenario, sys: SpectralSystem, f, thetas, times, mu=None) -> np.ndarray:
    """Table of E exp(-theta <f, Y_t>) over thetas (rows) and times (columns)."""
    mu = scenario.mu0 if mu is None else np.asarray(mu, dtype=float)
    times = np.asarray(times, dtype=float)
    order = np.argsort(times)
    out = np.empty((len(thetas), len(times)))
    for i, th in enumerate(thetas):
        grid = np.concatenate([[0.0], times[order]])
        sol = solve_cumulant(scenario, sys, th * np.asarray(f, dtype=float), float(times.max()), grid)
        vals = np.exp(-(sol.V[1:] @ mu) - sol.I[1:])
        out[i, order] = vals
    return out


def moments_from_laplace(scenario: Scenario, sys: SpectralSystem, f, t: float, mu=None,
                         h1: float = 1e-5, h2: float = 1e-3) -> tuple[float, float]:
    """First and second moments of <f, Y_t> by central differences of the Laplace functional.

    The steps are relative: f is first divided by E<|f|, Y_t> (from the mean semigroup),
    so that theta <f, Y_t> stays small whatever the growth.
    """
    f = np.asarray(f, dtype=float)
    scale = _abs_mean(scenario, sys, f, t, mu)
    if scale == 0.0:
        return 0.0, 0.0
    first, second = _fd_moments(scenario, sys, f / scale, t, mu, h1, h2)
    return first * scale, second * scale * scale


def _abs_mean(scenario, sys, f, t, mu) -> float:
    mu = scenario.mu0 if mu is None else np.asarray(mu, dtype=float)
    g = np.abs(f)
    T = sys.phi @ (np.exp(-sys.lam * t) * sys.coeffs(g))
    gam = scenario.immigration.measure @ sys.phi
    lam = sys.lam
    integ = np.where(np.abs(lam * t) < 1e-12, t, -np.expm1(-lam * t) / np.where(lam == 0, 1.0, lam))
    return float(mu @ T + np.sum(gam * sys.coeffs(g) * integ))


def _fd_moments(scenario, sys, f, t, mu, h1, h2):
    # V starts at h * f, so the absolute tolerance must be relative to that size
    size = float(np.max(np.abs(f)))
    a1, a2 = ATOL * min(1.0, h1 * size), ATOL * min(1.0, h2 * size)
    lp = laplace_Y(scenario, sys, h1 * f, t, mu, allow_signed=True, atol=a1)
    lm = laplace_Y(scenario, sys, -h1 * f, t, mu, allow_signed=True, atol=a1)
    first = -(lp - lm) / (2.0 * h1)
    lp2 = laplace_Y(scenario, sys, h2 * f, t, mu, allow_signed=True, atol=a2)
    lm2 = laplace_Y(scenario, sys, -h2 * f, t, mu, allow_signed=True, atol=a2)
    second = (lp2 - 2.0 + lm2) / (h2 * h2)
    return first, second

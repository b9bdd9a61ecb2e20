"""Exact first and second moments of <f, Y_t>, their large-t limits and the CLT constants.

All time integrals whose integrands are products of eigen-exponentials are done in
closed form through :mod:`superclt.expint`. A quadrature route over the same
integrands is kept (``method="quadrature"``) as an in-package cross-check.

Notation in this module: ``a`` are coefficients of f in the eigenbasis, ``lam`` the
per-basis-vector decay rates, ``c[k, l, p] = <A phi_k phi_l, phi_p>_m``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate

from .expint import conv_exp, interval_exp, tail_exp, triangle_exp
from .model import Scenario
from .spectral import FunctionProfile, SpectralSystem, profile_function

QUAD_EPSABS = 1e-11
QUAD_EPSREL = 1e-11


def triple_coeffs(scenario: Scenario, sys: SpectralSystem) -> np.ndarray:
    """c[k, l, p] = sum_x A(x) phi_k(x) phi_l(x) phi_p(x) m(x)."""
    w = scenario.branching.A * sys.m
    P = sys.phi
    return np.einsum("x,xk,xl,xp->klp", w, P, P, P, optimize=True)


def _mu(scenario: Scenario, mu) -> np.ndarray:
    if mu is None:
        return np.asarray(scenario.mu0, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (scenario.n,):
        raise ValueError(f"initial measure has shape {mu.shape}, expected ({scenario.n},)")
    return mu


def _delta_or_measure(scenario: Scenario, x_or_mu) -> np.ndarray:
    if x_or_mu is None:
        return np.asarray(scenario.mu0, dtype=float)
    if isinstance(x_or_mu, (int, np.integer)):
        e = np.zeros(scenario.n)
        e[int(x_or_mu)] = 1.0
        return e
    return _mu(scenario, x_or_mu)


def _active(a: np.ndarray) -> np.ndarray:
    scale = max(float(np.max(np.abs(a))), np.finfo(float).tiny) if a.size else 1.0
    return np.nonzero(np.abs(a) > 1e-14 * scale)[0]


@dataclass(frozen=True)
class MomentValues:
    t: float
    f: np.ndarray
    mean: float
    second: float
    variance: float
    initial_mean: float        # mu(T_t f)
    immigration_mean: float    # int_0^t Gamma(T_s f) ds
    initial_var: float         # branching of the initial mass
    immigrant_var: float       # branching of immigrant mass (Gamma double integral)
    arrival_var: float         # H-atom arrival noise

    @property
    def terms(self) -> tuple[float, float, float, float]:
        """(mean^2, initial_var, immigrant_var, arrival_var); they sum to ``second``."""
        return (self.mean ** 2, self.initial_var, self.immigrant_var, self.arrival_var)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["f"] = self.f.tolist()
        return d


def mean_Y(scenario: Scenario, sys: SpectralSystem, f, t: float, mu=None) -> float:
    return _mean_parts(scenario, sys, f, t, _mu(scenario, mu))[0]


def _mean_parts(scenario, sys, f, t, mu):
    if t < 0:
        raise ValueError("t must be nonnegative")
    f = np.asarray(f, dtype=float)
    if t == 0:
        v = float(mu @ f)
        return v, v, 0.0
    a = sys.coeffs(f)
    mu_phi = mu @ sys.phi
    gam_phi = scenario.immigration.measure @ sys.phi
    init = float(np.sum(a * np.exp(-sys.lam * t) * mu_phi))
    imm = float(sum(a[p] * gam_phi[p] * interval_exp(sys.lam[p], t) for p in _active(a)))
    return init + imm, init, imm


def second_moment_Y(scenario: Scenario, sys: SpectralSystem, f, t: float, mu=None,
                    method: str = "closed") -> MomentValues:
    """Second moment of <f, Y_t> split into its four contributions."""
    mu = _mu(scenario, mu)
    f = np.asarray(f, dtype=float)
    mean, init_mean, imm_mean = _mean_parts(scenario, sys, f, t, mu)
    if t == 0:
        return MomentValues(0.0, f, mean, mean * mean, 0.0, init_mean, imm_mean, 0.0, 0.0, 0.0)
    if method == "closed":
        v2, v3, v4 = _variance_closed(scenario, sys, f, t, mu)
    elif method == "quadrature":
        v2, v3, v4 = _variance_quadrature(scenario, sys, f, t, mu)
    else:
        raise ValueError(f"unknown method {method!r}")
    var = v2 + v3 + v4
    return MomentValues(float(t), f, mean, mean * mean + var, var, init_mean, imm_mean, v2, v3, v4)


def _variance_closed(scenario, sys, f, t, mu):
    a = sys.coeffs(f)
    idx = _active(a)
    lam = sys.lam
    c = triple_coeffs(scenario, sys)
    mu_phi = mu @ sys.phi
    gam_phi = scenario.immigration.measure @ sys.phi
    v2 = v3 = 0.0
    for k in idx:
        for l in idx:
            w = a[k] * a[l]
            kap = lam[k] + lam[l]
            for p in range(sys.n):
                ck = c[k, l, p]
                if ck == 0.0:
                    continue
                if mu_phi[p] != 0.0:
                    v2 += w * ck * mu_phi[p] * conv_exp(lam[p], kap, t)
                if gam_phi[p] != 0.0:
                    v3 += w * ck * gam_phi[p] * triangle_exp(lam[p], kap, t)
    v4 = 0.0
    im = scenario.immigration
    if im.H_atoms:
        nu_phi = im.nu_matrix @ sys.phi
        for j, rate in enumerate(im.rates):
            b = nu_phi[j] * a
            for k in idx:
                for l in idx:
                    v4 += rate * b[k] * b[l] * interval_exp(lam[k] + lam[l], t)
    return float(v2), float(v3), float(v4)


def _quad(fun, lo, hi):
    val, err = integrate.quad(fun, lo, hi, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=400)
    if not math.isfinite(val):
        raise ArithmeticError(f"quadrature failed on [{lo}, {hi}] (estimate {val}, error {err})")
    return val


def _variance_quadrature(scenario, sys, f, t, mu):
    a = sys.coeffs(f)
    lam = sys.lam
    c = triple_coeffs(scenario, sys)
    mu_phi = mu @ sys.phi
    gam_phi = scenario.immigration.measure @ sys.phi

    def sq_proj(v):
        # coefficients of A (T_v f)^2 in the eigenbasis
        av = a * np.exp(-lam * v)
        return np.einsum("k,l,klp->p", av, av, c)

    v2 = _quad(lambda s: float(np.sum(mu_phi * np.exp(-lam * s) * sq_proj(t - s))), 0.0, t)
    v3 = _quad(lambda v: float(sum(gam_phi[p] * sq_proj(v)[p] * interval_exp(lam[p], t - v)
                                   for p in range(sys.n))), 0.0, t)
    im = scenario.immigration
    v4 = 0.0
    if im.H_atoms:
        nu_phi = im.nu_matrix @ sys.phi
        v4 = _quad(lambda s: float(np.sum(im.rates * (nu_phi @ (a * np.exp(-lam * s))) ** 2)), 0.0, t)
    return v2, v3, v4


def assumption21(scenario: Scenario, sys: SpectralSystem, t0: float = 1.0) -> tuple[float, float]:
    """m(t0) = int Gamma(a_{2s}^{1/2}) ds and n(t0) = sum_j rate_j int <nu_j, a_{2s}^{1/2}>^2 ds."""
    if not t0 > 0:
        raise ValueError("t0 must be positive")
    P2 = sys.phi ** 2
    im = scenario.immigration

    def root_diag(s):
        return np.sqrt(P2 @ np.exp(-2.0 * sys.lam * s))

    gam = im.measure
    m_val = _quad(lambda s: float(gam @ root_diag(s)), 0.0, t0) if np.any(gam != 0) else 0.0
    n_val = 0.0
    if im.H_atoms:
        nu = im.nu_matrix
        n_val = _quad(lambda s: float(np.sum(im.rates * (nu @ root_diag(s)) ** 2)), 0.0, t0)
    return m_val, n_val


# -- large-time limits -------------------------------------------------------

def _require_supercritical(sys: SpectralSystem):
    if not sys.lambda1 < 0:
        raise ValueError(f"scenario is not supercritical (lambda1 = {sys.lambda1:.6g})")


def _cs_sigma2(c, a, lam, lam1):
    idx = _active(a)
    total = 0.0
    for k in idx:
        for l in idx:
            total += a[k] * a[l] * c[k, l, 0] * tail_exp(lam[k] + lam[l] - lam1)
    return float(total)


def _cl_limit_function(c, a_lead, lam, gam_lam):
    """Coefficients of F = sum_p <A f1^2, phi_p>_m phi_p / (lam_p - 2 lam_gamma)."""
    idx = _active(a_lead)
    proj = np.einsum("k,l,klp->p", a_lead[idx], a_lead[idx], c[np.ix_(idx, idx, np.arange(len(lam)))])
    return np.array([proj[p] * tail_exp(lam[p] - 2.0 * gam_lam) for p in range(len(lam))])


def variance_limits(scenario: Scenario, sys: SpectralSystem, profile: FunctionProfile, x_or_mu=None) -> float:
    """Large-t limit of the appropriately rescaled second moment or variance.

    C_s: lim e^{lambda_1 t} E<f,Y_t>^2.  C_c: lim t^{-1} e^{lambda_1 t} Var<f,Y_t>.
    C_l: lim e^{2 lambda_gamma t} Var<f,Y_t>.  ``x_or_mu`` is a 0-based site index
    (start from a unit point mass), an initial measure, or None for the scenario's own.
    """
    _require_supercritical(sys)
    mu = _delta_or_measure(scenario, x_or_mu)
    cls = profile.space_class
    if cls == "zero":
        return 0.0
    if cls == "mixed":
        raise ValueError("function has mixed class; project onto a single regime first")
    c = triple_coeffs(scenario, sys)
    lam = sys.lam
    lam1 = sys.lambda1
    phi1 = sys.phi1
    gam = scenario.immigration.measure
    growth = float(mu @ phi1) + float(gam @ phi1) / (-lam1)
    if cls == "C_s":
        return _cs_sigma2(c, profile.coeffs, lam, lam1) * growth
    if cls == "C_c":
        return growth * sys.inner(scenario.branching.A * profile.f1 ** 2, phi1)
    # C_l
    g_idx = sys.groups[int(profile.gamma) - 1]
    a_lead = np.zeros_like(profile.coeffs)
    a_lead[g_idx] = profile.coeffs[g_idx]
    lg = lam[g_idx[0]]
    Fc = _cl_limit_function(c, a_lead, lam, lg)
    F = sys.phi @ Fc
    out = float(mu @ F) + float(gam @ F) * tail_exp(-2.0 * lg)
    im = scenario.immigration
    if im.H_atoms:
        nu_f1 = im.nu_matrix @ profile.f1
        out += float(np.sum(im.rates * nu_f1 ** 2)) * tail_exp(-2.0 * lg)
    return out


@dataclass(frozen=True)
class CltConstants:
    sigma2_f: float | None
    rho2_h: float | None
    beta2_g: float | None
    mean_Wtilde: float
    var_Wtilde: float
    gamma_phi: float
    lambda1: float

    def to_dict(self) -> dict:
        return {
            "sigma2": self.sigma2_f,
            "rho2": self.rho2_h,
            "beta2": self.beta2_g,
            "mean_W": self.mean_Wtilde,
            "var_W": self.var_Wtilde,
            "gamma_phi1": self.gamma_phi,
            "lambda1": self.lambda1,
        }


def _as_profile(sys, f, name):
    if f is None or isinstance(f, FunctionProfile):
        return f
    return profile_function(sys, f, name=name)


def sigma2(scenario: Scenario, sys: SpectralSystem, profile: FunctionProfile) -> float:
    if profile.space_class == "zero":
        return 0.0
    if profile.space_class != "C_s":
        raise ValueError(f"sigma^2 needs a C_s function, got class {profile.space_class}")
    return _cs_sigma2(triple_coeffs(scenario, sys), profile.coeffs, sys.lam, sys.lambda1)


def rho2(scenario: Scenario, sys: SpectralSystem, profile: FunctionProfile) -> float:
    if profile.space_class == "zero":
        return 0.0
    if profile.space_class != "C_c":
        raise ValueError(f"rho^2 needs a C_c function, got class {profile.space_class}")
    return sys.inner(scenario.branching.A * profile.f ** 2, sys.phi1)


def beta2(scenario: Scenario, sys: SpectralSystem, profile: FunctionProfile) -> float:
    if profile.space_class == "zero":
        return 0.0
    if profile.space_class != "C_l":
        raise ValueError(f"beta^2 needs a C_l function, got class {profile.space_class}")
    c = triple_coeffs(scenario, sys)
    a = profile.coeffs
    idx = _active(a)
    lam = sys.lam
    return float(sum(a[k] * a[l] * c[k, l, 0] * tail_exp(sys.lambda1 - lam[k] - lam[l])
                     for k in idx for l in idx))


def clt_constants(scenario: Scenario, sys: SpectralSystem, f=None, h=None, g=None, mu=None) -> CltConstants:
    """Limit-law constants; f, h, g may be vectors or profiles and each is optional."""
    _require_supercritical(sys)
    mu = _mu(scenario, mu)
    fp = _as_profile(sys, f, "f")
    hp = _as_profile(sys, h, "h")
    gp = _as_profile(sys, g, "g")
    if hp is not None and not any(
            abs(2.0 * lk - sys.lambda1) <= 1e-9 * max(1.0, abs(lk)) for lk in sys.eigenvalues):
        raise ValueError("no critical eigenvalue (2 lambda_k = lambda_1): h is not available")
    phi1 = sys.phi1
    gphi = scenario.immigration.gamma(phi1)
    mean_w = float(mu @ phi1) + gphi / (-sys.lambda1)
    var_w = variance_limits(scenario, sys, profile_function(sys, phi1, "phi1"), mu)
    return CltConstants(
        sigma2_f=None if fp is None else sigma2(scenario, sys, fp),
        rho2_h=None if hp is None else rho2(scenario, sys, hp),
        beta2_g=None if gp is None else beta2(scenario, sys, gp),
        mean_Wtilde=mean_w,
        var_Wtilde=var_w,
        gamma_phi=gphi,
        lambda1=sys.lambda1,
    )


@dataclass(frozen=True)
class MartingaleConstants:
    k: int
    j: int
    lam_k: float
    mean_H: float          # E H_t for every t
    correction: float      # Gamma(phi)/(-lambda_k), added to H_inf to get W_inf
    mean_W: float

    def to_dict(self) -> dict:
        return asdict(self)


def martingale_constants(scenario: Scenario, sys: SpectralSystem, k: int = 1, j: int = 1, mu=None
                         ) -> MartingaleConstants:
    mu = _mu(scenario, mu)
    lk = float(sys.eigenvalues[k - 1])
    if not sys.lambda1 > 2.0 * lk:
        raise ValueError(f"need lambda_1 > 2 lambda_k for L^2 convergence (lambda_1={sys.lambda1:.6g}, "
                         f"lambda_{k}={lk:.6g})")
    phi = sys.eigenfunction(k, j)
    mean_h = float(mu @ phi)
    corr = scenario.immigration.gamma(phi) / (-lk)
    return MartingaleConstants(k, j, lk, mean_h, corr, mean_h + corr)


def h_compensator(gamma_phi: float, lam_k: float, t) -> np.ndarray:
    """lambda_k^{-1} (e^{lambda_k t} - 1) Gamma(phi), the drift removed from e^{lambda_k t}<phi, Y_t>."""
    t = np.asarray(t, dtype=float)
    if lam_k == 0.0:
        return t * gamma_phi
    return np.expm1(lam_k * t) / lam_k * gamma_phi

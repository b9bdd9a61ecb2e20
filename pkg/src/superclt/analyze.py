"""Statistical verdicts: Kolmogorov-Smirnov tests, martingale check, L^2 LLN and joint CLT.

Every test here is a deterministic function of its inputs (no internal randomness).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy import special

from .moments import CltConstants, h_compensator
from .simulate import PathEnsemble
from .spectral import FunctionProfile, SpectralSystem, _close

Z99 = 2.5758293035489004      # two-sided 99% normal quantile
SE_BAND = 3.5
SURVIVAL_EPS = 1e-12
MIN_MARTINGALE_REPLICATES = 1000
MIN_CLT_REPLICATES = 10_000
MAX_EXCLUSION = 0.01


class Refusal(ValueError):
    """A test declined to run because its preconditions are not met."""


# -- Kolmogorov-Smirnov ------------------------------------------------------

def kolmogorov_sf(x: float, tol: float = 1e-10) -> float:
    """P(K > x) for the Kolmogorov limit law, by whichever series converges fast."""
    if x <= 0:
        return 1.0
    if x < 1.0:
        # P(K <= x) = sqrt(2 pi)/x * sum_k exp(-(2k-1)^2 pi^2 / (8 x^2))
        c = -math.pi ** 2 / (8.0 * x * x)
        total = 0.0
        k = 1
        while True:
            term = math.exp(c * (2 * k - 1) ** 2)
            total += term
            if term < tol:
                break
            k += 1
        return min(1.0, max(0.0, 1.0 - math.sqrt(2.0 * math.pi) / x * total))
    total = 0.0
    k = 1
    while True:
        term = math.exp(-2.0 * k * k * x * x)
        total += term if k % 2 else -term
        if term < tol:
            break
        k += 1
    return min(1.0, max(0.0, 2.0 * total))


def _finite(x, name="sample") -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def ks_statistic(sample, cdf: Callable[[np.ndarray], np.ndarray]) -> tuple[float, float]:
    """Exact one-sample KS distance D and its asymptotic p-value P(K > sqrt(N) D)."""
    x = np.sort(_finite(sample))
    N = x.size
    if N < 8:
        raise ValueError(f"KS test needs at least 8 points, got {N}")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, N + 1)
    D = float(max(np.max(i / N - F), np.max(F - (i - 1) / N)))
    return D, kolmogorov_sf(math.sqrt(N) * D)


def ks_two_sample(a, b, presorted_b: bool = False) -> tuple[float, float]:
    """Two-sample KS distance (ties handled by evaluating both ECDFs on the pooled sample)."""
    a = np.sort(_finite(a, "first sample"))
    b = _finite(b, "second sample")
    if not presorted_b:
        b = np.sort(b)
    n, m = a.size, b.size
    if min(n, m) < 8:
        raise ValueError("KS test needs at least 8 points per sample")
    pooled = np.concatenate([a, b])
    Fa = np.searchsorted(a, pooled, side="right") / n
    Fb = np.searchsorted(b, pooled, side="right") / m
    D = float(np.max(np.abs(Fa - Fb)))
    return D, kolmogorov_sf(math.sqrt(n * m / (n + m)) * D)


def normal_cdf(var: float) -> Callable[[np.ndarray], np.ndarray]:
    sd = math.sqrt(var)
    return lambda x: special.ndtr(np.asarray(x) / sd)


# -- verdict container -------------------------------------------------------

@dataclass
class Check:
    name: str
    value: float
    threshold: Any
    passed: bool

    def to_dict(self):
        return {"name": self.name, "value": self.value, "threshold": self.threshold, "pass": self.passed}


@dataclass
class Verdict:
    test: str
    inputs: dict
    statistics: dict
    checks: list = field(default_factory=list)
    table: dict = field(default_factory=dict)     # per-replicate columns

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, value: float, threshold, passed: bool) -> None:
        self.checks.append(Check(name, float(value), threshold, bool(passed)))

    def to_dict(self) -> dict:
        return {
            "test": self.test,
            "inputs": self.inputs,
            "statistics": self.statistics,
            "thresholds": {c.name: c.threshold for c in self.checks},
            "checks": [c.to_dict() for c in self.checks],
            "pass": self.passed,
        }


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def _var_se(x: np.ndarray) -> tuple[float, float]:
    """Sample variance and its delta-method standard error sqrt((m4 - s^4)/N)."""
    c = x - x.mean()
    s2 = float(np.mean(c * c) * x.size / (x.size - 1))
    m4 = float(np.mean(c ** 4))
    return s2, math.sqrt(max(m4 - s2 * s2, 0.0) / x.size)


ROUNDOFF_REL = 1e-9


def _within(value: float, target: float, se: float, band: float = SE_BAND) -> bool:
    # the roundoff floor only matters for (near-)degenerate samples
    return abs(value - target) <= max(band * se, ROUNDOFF_REL * max(1.0, abs(target)))


def _degenerate(x: np.ndarray) -> bool:
    return float(x.std()) <= 1e-10 * max(1.0, float(np.mean(np.abs(x))))


# -- martingale ----------------------------------------------------------------

def martingale_test(ensemble: PathEnsemble, sys: SpectralSystem, k: int, j: int, gamma_const: float,
                    expected: float, correction_sign: float = 1.0,
                    min_replicates: int = MIN_MARTINGALE_REPLICATES) -> Verdict:
    """H_t = e^{lambda_k t}<phi, Y_t> - sign * lambda_k^{-1}(e^{lambda_k t} - 1) Gamma(phi).

    Passes iff the 99% CI of the mean per-replicate slope of H against t contains 0
    and every snapshot mean is within 3.5 SE of ``expected`` = <mu, phi>.
    ``correction_sign=-1`` is the negative control.
    """
    lam_k = float(sys.eigenvalues[k - 1])
    if not sys.lambda1 > 2.0 * lam_k:
        raise Refusal(f"martingale test needs lambda_1 > 2 lambda_k (k={k})")
    valid = ensemble.valid()
    R = int(valid.sum())
    if R < min_replicates:
        raise Refusal(f"insufficient replicates: {R} < {min_replicates}")
    times = ensemble.times
    if times.size < 3:
        raise Refusal("martingale test needs at least 3 snapshots")
    p = sys.basis_index(k, j)
    z = ensemble.Z[valid][:, :, p]
    H = np.exp(lam_k * times)[None, :] * z - correction_sign * h_compensator(gamma_const, lam_k, times)[None, :]
    tc = times - times.mean()
    slopes = (H - H.mean(axis=1, keepdims=True)) @ tc / float(tc @ tc)
    slope, slope_se = _mean_se(slopes)
    v = Verdict("martingale-test",
                {"k": k, "j": j, "gamma": gamma_const, "expected": expected, "times": times.tolist(),
                 "replicates": R, "correction_sign": correction_sign}, {})
    lo, hi = slope - Z99 * slope_se, slope + Z99 * slope_se
    scale = max(1.0, abs(expected))
    v.add("slope_ci_contains_zero", slope, [lo, hi],
          lo <= 0.0 <= hi or abs(slope) <= ROUNDOFF_REL * scale)
    means = []
    for i, t in enumerate(times):
        m, se = _mean_se(H[:, i])
        means.append({"t": float(t), "mean": m, "se": se})
        v.add(f"mean_at_t={t:g}", m, [expected - SE_BAND * se, expected + SE_BAND * se], _within(m, expected, se))
    v.statistics = {"slope": slope, "slope_se": slope_se, "slope_ci99": [lo, hi], "snapshots": means}
    v.table = {"replicate": np.nonzero(valid)[0], **{f"H_t={t:g}": H[:, i] for i, t in enumerate(times)},
               "slope": slopes}
    return v


# -- law of large numbers --------------------------------------------------------

def lln_test(ensemble: PathEnsemble, sys: SpectralSystem, profile: FunctionProfile, t1: float, t2: float,
             t_proxy: float, decrease_factor: float = 1.5, ratio_cap: float = 0.1) -> Verdict:
    """L^2 convergence of e^{lambda_gamma t}<f, Y_t> to sum_j a_j W_inf^{gamma, j}.

    W_inf is proxied on the same path at ``t_proxy``.
    """
    if profile.is_zero:
        raise Refusal("f = 0 has no leading eigenspace")
    gam = int(profile.gamma)
    lam_g = float(sys.eigenvalues[gam - 1])
    if not sys.lambda1 > 2.0 * lam_g or _close(sys.lambda1, 2.0 * lam_g):
        raise Refusal(f"LLN needs lambda_1 > 2 lambda_gamma(f); got lambda_1={sys.lambda1:.6g}, "
                      f"lambda_gamma={lam_g:.6g} (class {profile.space_class})")
    if not t1 < t2 <= t_proxy:
        raise Refusal("need t1 < t2 <= proxy horizon")
    valid = ensemble.valid()
    Zv = ensemble.Z[valid]
    a = profile.coeffs
    g_idx = sys.groups[gam - 1]
    iT = ensemble.snapshot_index(t_proxy)
    w_hat = np.exp(lam_g * t_proxy) * (Zv[:, iT, g_idx] @ a[g_idx])
    stats = {}
    for name, t in (("t1", t1), ("t2", t2)):
        it = ensemble.snapshot_index(t)
        scaled = np.exp(lam_g * t) * (Zv[:, it, :] @ a)
        D = scaled - w_hat
        stats[name] = {"t": t, "mean_D2": float(np.mean(D * D)), "mean_scaled2": float(np.mean(scaled ** 2))}
    d1, d2 = stats["t1"]["mean_D2"], stats["t2"]["mean_D2"]
    s2 = stats["t2"]["mean_scaled2"]
    v = Verdict("lln-test", {"gamma": gam, "t1": t1, "t2": t2, "t_proxy": t_proxy,
                             "replicates": int(valid.sum())}, stats)
    tiny = 1e-20 * max(1.0, s2)
    if d1 <= tiny and d2 <= tiny:
        v.add("decrease_factor", math.inf, decrease_factor, True)
        v.add("relative_error_at_t2", 0.0, ratio_cap, True)
    else:
        factor = d1 / d2 if d2 > 0 else math.inf
        v.add("decrease_factor", factor, decrease_factor, factor >= decrease_factor)
        rel = d2 / s2 if s2 > 0 else math.inf
        v.add("relative_error_at_t2", rel, ratio_cap, rel < ratio_cap)
    v.table = {"replicate": np.nonzero(valid)[0], "W_proxy": w_hat}
    return v


# -- central limit theorem --------------------------------------------------------

@dataclass
class CltSample:
    t: float
    lookahead: float
    W_hat: np.ndarray
    U_f: np.ndarray | None
    U_h: np.ndarray | None
    U_g: np.ndarray | None
    excluded: int
    total: int
    index: np.ndarray | None = None      # replicate index of each kept row

    @property
    def exclusion_fraction(self) -> float:
        return self.excluded / self.total if self.total else 0.0


def build_clt_sample(ensemble: PathEnsemble, sys: SpectralSystem, t: float, lookahead: float,
                     f: FunctionProfile | None = None, h: FunctionProfile | None = None,
                     g: FunctionProfile | None = None, eps: float = SURVIVAL_EPS) -> CltSample:
    valid = ensemble.valid()
    Zv = ensemble.Z[valid]
    it = ensemble.snapshot_index(t)
    Zt = Zv[:, it, :]
    y1 = Zt[:, 0]
    keep = y1 > eps
    Zt = Zt[keep]
    y1 = y1[keep]
    root = np.sqrt(y1)
    W = np.exp(sys.lambda1 * t) * y1
    U_f = None if f is None else (Zt @ f.coeffs) / root
    U_h = None if h is None else (Zt @ h.coeffs) / np.sqrt(t * y1)
    U_g = None
    if g is not None:
        if g.space_class != "C_l":
            raise Refusal(f"g must be in C_l, got {g.space_class}")
        iT = ensemble.snapshot_index(t + lookahead)
        ZT = Zv[keep][:, iT, :]
        lam = sys.lam
        # sum_p e^{-lambda_p t} a_p W_p with W_p = e^{lambda_p (t + L)} <phi_p, Y_{t+L}>
        proxy = ZT @ (g.coeffs * np.exp(lam * lookahead))
        U_g = (Zt @ g.coeffs - proxy) / root
    index = np.nonzero(valid)[0][keep]
    return CltSample(t, lookahead, W, U_f, U_h, U_g, int((~keep).sum()), int(valid.sum()), index)


def _normal_checks(v: Verdict, label: str, x: np.ndarray, ref_var: float, lo: float, hi: float,
                   ks_level: float | None):
    s2, _ = _var_se(x)
    stats = {"var": s2, "reference_var": ref_var}
    if ref_var == 0.0:
        ok = s2 <= 1e-20
        v.add(f"{label}_degenerate", s2, 1e-20, ok)
        stats["degenerate"] = True
        return stats
    ratio = s2 / ref_var
    stats["var_ratio"] = ratio
    v.add(f"{label}_var_ratio", ratio, [lo, hi], lo <= ratio <= hi)
    D, p = ks_statistic(x, normal_cdf(ref_var))
    stats.update(ks_D=D, ks_p=p)
    if ks_level is not None:
        v.add(f"{label}_ks_p", p, ks_level, p > ks_level)
    return stats


def clt_test(ensemble: PathEnsemble, sys: SpectralSystem, constants: CltConstants, t: float, lookahead: float,
             f: FunctionProfile | None = None, h: FunctionProfile | None = None,
             g: FunctionProfile | None = None, min_replicates: int = MIN_CLT_REPLICATES,
             ks_level: float = 0.01, var_band: float = 0.07, critical_band: float = 0.10) -> Verdict:
    """Joint CLT check for (W_hat, U_g, U_h, U_f) at horizon t."""
    if not sys.lambda1 < 0:
        raise Refusal("CLT needs a supercritical scenario")
    if h is not None and not any(_close(2.0 * lk, sys.lambda1) for lk in sys.eigenvalues):
        raise Refusal("no critical eigenspace (2 lambda_k = lambda_1): h cannot be tested")
    for prof, cls, name in ((f, "C_s", "f"), (h, "C_c", "h"), (g, "C_l", "g")):
        if prof is not None and prof.space_class not in (cls, "zero"):
            raise Refusal(f"{name} must be in {cls}, got {prof.space_class}")
    R = int(ensemble.valid().sum())
    if R < min_replicates:
        raise Refusal(f"insufficient replicates: {R} < {min_replicates}")
    cs = build_clt_sample(ensemble, sys, t, lookahead, f, h, g)
    if cs.exclusion_fraction > MAX_EXCLUSION:
        raise Refusal(f"exclusion fraction {cs.exclusion_fraction:.4f} exceeds {MAX_EXCLUSION}")
    N = cs.W_hat.size
    v = Verdict("clt-test", {"t": t, "lookahead": lookahead, "replicates": R,
                             "functions": {k: (None if p is None else p.f.tolist())
                                           for k, p in (("f", f), ("h", h), ("g", g))},
                             "constants": constants.to_dict()}, {})
    stats: dict[str, Any] = {"N": N, "excluded": cs.excluded, "exclusion_fraction": cs.exclusion_fraction}

    wm, wm_se = _mean_se(cs.W_hat)
    wv, wv_se = _var_se(cs.W_hat)
    stats["W"] = {"mean": wm, "mean_se": wm_se, "var": wv, "var_se": wv_se}
    v.add("W_mean", wm, [constants.mean_Wtilde - SE_BAND * wm_se, constants.mean_Wtilde + SE_BAND * wm_se],
          _within(wm, constants.mean_Wtilde, wm_se))
    v.add("W_var", wv, [constants.var_Wtilde - SE_BAND * wv_se, constants.var_Wtilde + SE_BAND * wv_se],
          _within(wv, constants.var_Wtilde, wv_se))

    cols = {"W_hat": cs.W_hat}
    if cs.U_f is not None:
        stats["U_f"] = _normal_checks(v, "U_f", cs.U_f, constants.sigma2_f, 1 - var_band, 1 + var_band, ks_level)
        cols["U_f"] = cs.U_f
    if cs.U_g is not None:
        stats["U_g"] = _normal_checks(v, "U_g", cs.U_g, constants.beta2_g, 1 - var_band, 1 + var_band, ks_level)
        cols["U_g"] = cs.U_g
    if cs.U_h is not None:
        stats["U_h"] = _normal_checks(v, "U_h", cs.U_h, constants.rho2_h, 1 - critical_band, 1 + critical_band,
                                      None)
        cols["U_h"] = cs.U_h

    bound = 3.0 / math.sqrt(N)
    names = list(cols)
    corr = {}
    for i in range(len(names)):
        for k in range(i + 1, len(names)):
            x, y = cols[names[i]], cols[names[k]]
            r = 0.0 if _degenerate(x) or _degenerate(y) else float(np.corrcoef(x, y)[0, 1])
            key = f"corr({names[i]},{names[k]})"
            corr[key] = r
            v.add(key, abs(r), bound, abs(r) < bound)
    stats["correlations"] = corr
    v.statistics = stats
    v.table = {"replicate": cs.index, **cols}
    return v

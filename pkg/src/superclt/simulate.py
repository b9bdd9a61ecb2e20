"""Monte Carlo paths of Y on a finite state space.

One step of length h is a symmetric splitting around a stochastic substep:
  1. exact mean flow over h/2: Y <- exp(h/2 L_adj) Y,
  2. Feller noise with k = beta b per site, mean zero and variance 2 k Y h,
  3. compensated branching jumps (Poisson counts of each atom minus the drift beta Y sum r y h),
  4. immigration: eta h plus Poisson(rate_j h) arrivals of nu_j,
  5. exact mean flow over the remaining h/2.
Step 2 draws the exact noise-only transition, Gamma(Poisson(Y/(k h)), k h), while
Y/(k h) < EXACT_NOISE_CAP. Above the cap a Gaussian increment is used; there it
crosses zero with probability below 1e-3, so the truncation at zero adds no
visible bias. Truncating a Gaussian near zero instead pushes mass upward wherever
eta < k, which shows up as a biased ensemble mean. All rates are frozen at the
state after step 1. Placing the noise mid-step makes the
first and second moments accurate to O(h^2); with the noise at the end of the
step the variance error is O(h) and grows with the growth rate -lambda_1.

The state is kept in eigen-coordinates z_p = <phi_p, Y>, where the flow is diagonal
(z_p <- e^{-lambda_p h} z_p). Increments are formed per site and added as
Phi^T delta, so a subdominant component such as <phi_2, Y> keeps full relative
precision even when it is e^{-80} times the total mass. Pairings <f, Y> are
computed from z, never from the reconstructed site vector.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .model import Scenario
from .rng import (STREAM_COUPLED, STREAM_EXACT, STREAM_FULL, STREAM_IMMIGRATION, STREAM_NATIVE,
                  seed_stream)
from .spectral import SpectralSystem, build_spectral

SCHEME_VERSION = "strang-eigen-cbnoise-1"
MODES = ("full", "native_only", "immigration_only")
_POISSON_NORMAL_CUTOFF = 1e12
# Gaussian branch only where P(increment < -Y) < 1e-3, i.e. Y/(k h) >= 2 * 3.1**2.
EXACT_NOISE_CAP = 20.0
_CHUNK = 512
_COUPLED_CHUNK = 10_000


def worker_count(requested: int | None = None) -> int:
    env = os.environ.get("SUPERCLT_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ValueError(f"SUPERCLT_THREADS must be a positive integer, got {env!r}") from None
    return max(1, min(cap, requested or cap))


# -- numba kernels -----------------------------------------------------------

@njit(nogil=True, cache=True)
def _diffusion_increment(y, h, coef, xi):
    """Euler increment of dY = sqrt(coef * Y) dB over h, with Y clipped at 0."""
    if y <= 0.0 or coef == 0.0:
        return 0.0
    return math.sqrt(coef * y * h) * xi


@njit(nogil=True, cache=True)
def _simulate_path(rng, z0, phi, msite, decay, seg_steps, seg_h, dt,
                   diff_coef, comp, jump_site, jump_y, jump_rate, eta, nu, nu_rate, immigrate,
                   exact_cap, out_z, out_y):
    """One replicate; returns 0, or 1 if the state became non-finite.

    ``decay[0]`` is exp(-lambda dt/2); ``decay[1 + s]`` is the half-step decay of the
    last, shortened step of segment s, whose length is ``seg_h[s]``.
    The step body is written inline: calling a helper that takes the Generator
    costs about ten times the step itself.
    """
    n = z0.shape[0]
    z = z0.copy()
    y = np.zeros(n)
    delta = np.zeros(n)
    for s in range(seg_steps.shape[0]):
        k = seg_steps[s]
        for i in range(k):
            row = 0
            h = dt
            if i == k - 1:
                row = 1 + s
                h = seg_h[s]
            # exact mean flow, first half
            for p in range(n):
                z[p] *= decay[row, p]
            for x in range(n):
                acc = 0.0
                for p in range(n):
                    acc += phi[x, p] * z[p]
                y[x] = msite[x] * acc
            # diffusion and compensated jumps, frozen at the post-flow state
            for x in range(n):
                yx = y[x] if y[x] > 0.0 else 0.0
                d = 0.0
                if diff_coef[x] != 0.0 and yx > 0.0:
                    kh = 0.5 * diff_coef[x] * h
                    families = yx / kh
                    if families < exact_cap:
                        cnt = rng.poisson(families)
                        d = (rng.gamma(float(cnt), kh) if cnt > 0 else 0.0) - yx
                    else:
                        d = _diffusion_increment(yx, h, diff_coef[x], rng.standard_normal())
                delta[x] = d - comp[x] * yx * h
            for q in range(jump_site.shape[0]):
                x = jump_site[q]
                yx = y[x] if y[x] > 0.0 else 0.0
                lam = jump_rate[q] * yx * h
                if lam > 0.0:
                    if lam > _POISSON_NORMAL_CUTOFF:
                        cnt = max(0.0, math.floor(lam + math.sqrt(lam) * rng.standard_normal() + 0.5))
                    else:
                        cnt = float(rng.poisson(lam))
                    delta[x] += cnt * jump_y[q]
            for x in range(n):
                if y[x] + delta[x] < 0.0:
                    delta[x] = -y[x]
            if immigrate:
                for x in range(n):
                    delta[x] += eta[x] * h
                for j in range(nu_rate.shape[0]):
                    cnt = float(rng.poisson(nu_rate[j] * h))
                    if cnt > 0.0:
                        for x in range(n):
                            delta[x] += cnt * nu[j, x]
            for p in range(n):
                acc = 0.0
                for x in range(n):
                    acc += phi[x, p] * delta[x]
                z[p] = (z[p] + acc) * decay[row, p]
        for p in range(n):
            if not math.isfinite(z[p]):
                return 1
            out_z[s, p] = z[p]
        for x in range(n):
            acc = 0.0
            for p in range(n):
                acc += phi[x, p] * z[p]
            v = msite[x] * acc
            out_y[s, x] = v if v > 0.0 else 0.0
    return 0


@njit(nogil=True, cache=True)
def _coupled_single_site(rng, y0, alpha, coef, fine_dt, fine_steps, factors, exact_cap, out):
    """Scheme paths at several step sizes sharing one Brownian path.

    Level i uses steps of factors[i] * fine_dt; its normal is the normalized sum of
    the factors[i] fine normals inside the coarse step.
    """
    R = out.shape[0]
    xi = np.empty(fine_steps)
    for r in range(R):
        for i in range(fine_steps):
            xi[i] = rng.standard_normal()
        for lev in range(factors.shape[0]):
            f = factors[lev]
            h = f * fine_dt
            half = math.exp(0.5 * alpha * h)
            scale = 1.0 / math.sqrt(f)
            y = y0
            for c in range(fine_steps // f):
                s = 0.0
                for i in range(c * f, (c + 1) * f):
                    s += xi[i]
                y *= half
                kh = 0.5 * coef * h
                if y > 0.0 and y / kh < exact_cap:
                    cnt = rng.poisson(y / kh)
                    y = rng.gamma(float(cnt), kh) if cnt > 0 else 0.0
                else:
                    d = _diffusion_increment(y, h, coef, s * scale)
                    y = y + d if y + d > 0.0 else 0.0
                y *= half
            out[r, lev] = y


# -- configuration and results ----------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    dt: float
    t_snapshots: tuple
    replicates: int
    master_seed: int
    mode: str = "full"

    def __post_init__(self):
        snaps = tuple(float(t) for t in self.t_snapshots)
        object.__setattr__(self, "t_snapshots", snaps)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not snaps:
            raise ValueError("at least one snapshot time is required")
        if snaps[0] < 0 or any(b <= a for a, b in zip(snaps, snaps[1:])):
            raise ValueError("snapshot times must be nonnegative and strictly increasing")
        gaps = np.diff((0.0,) + snaps)
        pos = gaps[gaps > 0]
        if pos.size and self.dt > float(pos.min()) * (1 + 1e-12):
            raise ValueError(f"dt={self.dt} exceeds the smallest snapshot gap {float(pos.min())}")
        if int(self.replicates) < 1:
            raise ValueError("replicates must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")

    def with_(self, **kw) -> "SimConfig":
        d = dict(dt=self.dt, t_snapshots=self.t_snapshots, replicates=self.replicates,
                 master_seed=self.master_seed, mode=self.mode)
        d.update(kw)
        return SimConfig(**d)


@dataclass
class PathEnsemble:
    times: np.ndarray          # (S,)
    Y: np.ndarray              # (R, S, n) site masses, clipped at 0
    Z: np.ndarray              # (R, S, n) eigen-coordinates <phi_p, Y>
    phi: np.ndarray
    m: np.ndarray
    mode: str
    stream_id: int
    master_seed: int
    failures: int = 0
    failed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def replicates(self) -> int:
        return self.Y.shape[0]

    def snapshot_index(self, t: float) -> int:
        idx = np.nonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, abs(t)))[0]
        if idx.size == 0:
            raise KeyError(f"t={t} is not a snapshot time (have {self.times.tolist()})")
        return int(idx[0])

    def coeffs(self, f) -> np.ndarray:
        return self.phi.T @ (self.m * np.asarray(f, dtype=float))

    def pair(self, f, t: float | None = None) -> np.ndarray:
        """<f, Y> per replicate: shape (R, S), or (R,) when t is given."""
        Zs = self.Z if t is None else self.Z[:, self.snapshot_index(t), :]
        return Zs @ self.coeffs(f)

    def valid(self) -> np.ndarray:
        mask = np.ones(self.replicates, dtype=bool)
        mask[self.failed] = False
        return mask

    def __add__(self, other: "PathEnsemble") -> "PathEnsemble":
        if self.Y.shape != other.Y.shape or not np.allclose(self.times, other.times):
            raise ValueError("ensembles must share replicate count and snapshot times")
        failed = np.union1d(self.failed, other.failed)
        return PathEnsemble(self.times, self.Y + other.Y, self.Z + other.Z, self.phi, self.m,
                            f"{self.mode}+{other.mode}", -1, self.master_seed, len(failed), failed)


@dataclass(frozen=True)
class _Kernel:
    z0: np.ndarray
    phi: np.ndarray
    msite: np.ndarray
    decay: np.ndarray
    seg_steps: np.ndarray
    seg_h: np.ndarray
    dt: float
    diff_coef: np.ndarray
    comp: np.ndarray
    jump_site: np.ndarray
    jump_y: np.ndarray
    jump_rate: np.ndarray
    eta: np.ndarray
    nu: np.ndarray
    nu_rate: np.ndarray
    immigrate: bool
    exact_cap: float


def _segments(snaps, dt):
    steps, rem = [], []
    prev = 0.0
    for t in snaps:
        gap = t - prev
        if gap <= 0:
            steps.append(0)
            rem.append(dt)
        else:
            k = max(1, math.ceil(gap / dt - 1e-9))
            steps.append(k)
            rem.append(gap - (k - 1) * dt)
        prev = t
    return np.array(steps, dtype=np.int64), np.array(rem)


def _prepare(scenario: Scenario, sys: SpectralSystem, config: SimConfig) -> _Kernel:
    br = scenario.branching
    im = scenario.immigration
    n = scenario.n
    start = np.zeros(n) if config.mode == "immigration_only" else np.asarray(scenario.mu0, dtype=float)
    seg_steps, seg_rem = _segments(config.t_snapshots, config.dt)
    sites, ys, rates = [], [], []
    for i, atoms in enumerate(br.jump_atoms):
        for y, r in atoms:
            if r > 0 and br.beta[i] > 0:
                sites.append(i)
                ys.append(y)
                rates.append(br.beta[i] * r)
    nu = im.nu_matrix if im.H_atoms else np.zeros((0, n))
    return _Kernel(
        z0=sys.phi.T @ start,
        phi=np.ascontiguousarray(sys.phi),
        msite=np.asarray(sys.m, dtype=float),
        decay=np.exp(-0.5 * np.outer(np.concatenate([[config.dt], seg_rem]), sys.lam)),
        seg_steps=seg_steps,
        seg_h=seg_rem,
        dt=float(config.dt),
        diff_coef=2.0 * br.beta * br.b,
        comp=br.beta * br.jump_first_moment,
        jump_site=np.array(sites, dtype=np.int64),
        jump_y=np.array(ys, dtype=float),
        jump_rate=np.array(rates, dtype=float),
        eta=np.asarray(im.eta, dtype=float),
        nu=np.ascontiguousarray(nu, dtype=float),
        nu_rate=im.rates if im.H_atoms else np.zeros(0),
        immigrate=config.mode != "native_only",
        exact_cap=EXACT_NOISE_CAP,
    )


def _run_chunk(kern: _Kernel, seed: int, stream_id: int, lo: int, hi: int, Z, Y, status):
    for r in range(lo, hi):
        rng = seed_stream(seed, r, stream_id)
        status[r] = _simulate_path(rng, kern.z0, kern.phi, kern.msite, kern.decay,
                                   kern.seg_steps, kern.seg_h, kern.dt, kern.diff_coef, kern.comp,
                                   kern.jump_site, kern.jump_y, kern.jump_rate, kern.eta, kern.nu,
                                   kern.nu_rate, kern.immigrate, kern.exact_cap, Z[r], Y[r])


_MODE_STREAM = {"full": STREAM_FULL, "native_only": STREAM_NATIVE, "immigration_only": STREAM_IMMIGRATION}


def simulate_ensemble(scenario: Scenario, config: SimConfig, sys: SpectralSystem | None = None,
                      stream_id: int | None = None, threads: int | None = None) -> PathEnsemble:
    """Simulate ``config.replicates`` independent paths; output is independent of ``threads``."""
    sys = build_spectral(scenario) if sys is None else sys
    kern = _prepare(scenario, sys, config)
    R = int(config.replicates)
    S = len(config.t_snapshots)
    n = scenario.n
    sid = _MODE_STREAM[config.mode] if stream_id is None else int(stream_id)
    Z = np.full((R, S, n), np.nan)
    Y = np.full((R, S, n), np.nan)
    status = np.zeros(R, dtype=np.int64)
    chunks = [(lo, min(R, lo + _CHUNK)) for lo in range(0, R, _CHUNK)]
    workers = worker_count(threads)
    if workers == 1 or len(chunks) == 1:
        for lo, hi in chunks:
            _run_chunk(kern, config.master_seed, sid, lo, hi, Z, Y, status)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_run_chunk, kern, config.master_seed, sid, lo, hi, Z, Y, status)
                    for lo, hi in chunks]
            for fu in futs:
                fu.result()
    failed = np.nonzero(status != 0)[0]
    return PathEnsemble(np.array(config.t_snapshots), Y, Z, sys.phi.copy(), sys.m.copy(), config.mode,
                        sid, int(config.master_seed), int(failed.size), failed)


def decomposition_ensemble(scenario: Scenario, config: SimConfig, sys: SpectralSystem | None = None,
                           threads: int | None = None) -> tuple[PathEnsemble, PathEnsemble]:
    """Independent native (from mu, no immigration) and immigrant (from 0) ensembles."""
    sys = build_spectral(scenario) if sys is None else sys
    native = simulate_ensemble(scenario, config.with_(mode="native_only"), sys, threads=threads)
    immig = simulate_ensemble(scenario, config.with_(mode="immigration_only"), sys, threads=threads)
    return native, immig


# -- exact one-site transition -------------------------------------------------

def _cb_params(dt, beta, a, b):
    alpha = beta * a
    k = beta * b
    growth = math.exp(alpha * dt)
    c = k * dt if alpha == 0 else k * math.expm1(alpha * dt) / alpha
    return alpha, k, growth, c


def exact_single_site_step(y: float, dt: float, beta: float, a: float, b: float,
                           rng: np.random.Generator, eta: float = 0.0) -> float:
    """Exact draw of the one-site quadratic CB(I) state after dt, started from y.

    Poisson mixture of Gammas: N ~ Poisson(y e^{alpha dt}/c), X ~ Gamma(N + eta/k, scale c),
    with k = beta b and c = k (e^{alpha dt} - 1)/alpha; its Laplace exponent is
    y theta e^{alpha dt}/(1 + theta c) + (eta/k) log(1 + theta c).
    """
    if y < 0 or dt < 0:
        raise ValueError("y and dt must be nonnegative")
    alpha, k, growth, c = _cb_params(dt, beta, a, b)
    if k == 0 or dt == 0:
        drift = eta * dt if alpha == 0 else eta * math.expm1(alpha * dt) / alpha
        return y * growth + drift
    N = rng.poisson(y * growth / c) if y > 0 else 0
    shape = N + eta / k
    return float(rng.gamma(shape, c)) if shape > 0 else 0.0


def exact_single_site_sample(y: float, dt: float, beta: float, a: float, b: float, size: int,
                             rng: np.random.Generator, eta: float = 0.0) -> np.ndarray:
    """Vectorized form of :func:`exact_single_site_step` (``size`` independent draws)."""
    alpha, k, growth, c = _cb_params(dt, beta, a, b)
    if k == 0 or dt == 0:
        return np.full(size, exact_single_site_step(y, dt, beta, a, b, rng, eta))
    N = rng.poisson(y * growth / c, size=size) if y > 0 else np.zeros(size, dtype=np.int64)
    shape = N + eta / k
    out = np.zeros(size)
    pos = shape > 0
    out[pos] = rng.gamma(shape[pos], c)
    return out


@dataclass(frozen=True)
class BiasStudy:
    dts: tuple
    ks: tuple                  # two-sample KS distance per dt
    p_values: tuple
    n_scheme: int
    n_exact: int
    t: float

    @property
    def monotone(self) -> bool:
        return all(b < a for a, b in zip(self.ks, self.ks[1:]))


def coupled_scheme_sample(y0: float, t: float, beta: float, a: float, b: float, dts, size: int,
                          master_seed: int, threads: int | None = None) -> np.ndarray:
    """One-site scheme draws at each dt, all levels driven by a shared Brownian path.

    Returns (size, len(dts)). The dts must be integer multiples of the smallest one and
    divide t.
    """
    dts = [float(d) for d in dts]
    fine = min(dts)
    factors = np.array([round(d / fine) for d in dts], dtype=np.int64)
    fine_steps = round(t / fine)
    if not np.allclose(factors * fine, dts, rtol=1e-9) or abs(fine_steps * fine - t) > 1e-9:
        raise ValueError("dts must be integer multiples of the finest step and divide t")
    if np.any(fine_steps % factors):
        raise ValueError("every dt must divide t")
    out = np.empty((size, len(dts)))
    chunks = [(lo, min(size, lo + _COUPLED_CHUNK)) for lo in range(0, size, _COUPLED_CHUNK)]

    def run(ci):
        lo, hi = chunks[ci]
        rng = seed_stream(master_seed, ci, STREAM_COUPLED)
        _coupled_single_site(rng, float(y0), beta * a, 2.0 * beta * b, fine, fine_steps, factors,
                             EXACT_NOISE_CAP, out[lo:hi])

    workers = worker_count(threads)
    if workers == 1:
        for ci in range(len(chunks)):
            run(ci)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(len(chunks))))
    return out


def bias_study(y0: float = 1.0, t: float = 1.0, beta: float = 1.0, a: float = 0.5, b: float = 0.5,
               dts=(0.04, 0.02, 0.01, 0.005), n_scheme: int = 1_000_000, n_exact: int = 2_000_000,
               master_seed: int = 0, threads: int | None = None) -> BiasStudy:
    """KS distance of the one-site scheme at each dt from exact CB draws."""
    from .analyze import ks_two_sample

    scheme = coupled_scheme_sample(y0, t, beta, a, b, dts, n_scheme, master_seed, threads)
    exact = exact_single_site_sample(y0, t, beta, a, b, n_exact, seed_stream(master_seed, 0, STREAM_EXACT))
    exact.sort()
    res = [ks_two_sample(scheme[:, i], exact, presorted_b=True) for i in range(len(dts))]
    return BiasStudy(tuple(dts), tuple(r[0] for r in res), tuple(r[1] for r in res), n_scheme, n_exact, t)

"""Eigen-structure of the mean semigroup T_t = exp(t (Q + diag(alpha))).

The generator is m-symmetric, so D^{1/2} L D^{-1/2} (D = diag(m)) is a real
symmetric matrix and its eigenvectors give an m-orthonormal eigenbasis.
Eigenvalues are stored with the sign convention of the theory: the generator
spectrum is -lambda_k, with lambda_1 < lambda_2 < ...
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Scenario

CLUSTER_RTOL = 1e-9
COEFF_RTOL = 1e-10


class SpectralError(ArithmeticError):
    pass


def _close(x: float, y: float) -> bool:
    return abs(x - y) <= CLUSTER_RTOL * max(1.0, abs(x), abs(y))


@dataclass(frozen=True)
class SpectralSystem:
    m: np.ndarray
    L: np.ndarray
    lam: np.ndarray          # per basis vector, ascending
    phi: np.ndarray          # n x n, column p is the p-th eigenfunction
    groups: tuple            # index arrays of basis vectors sharing one lambda_k

    @property
    def n(self) -> int:
        return self.m.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        """Distinct lambda_k, ascending."""
        return np.array([self.lam[g[0]] for g in self.groups])

    @property
    def multiplicities(self) -> list[int]:
        return [len(g) for g in self.groups]

    @property
    def lambda1(self) -> float:
        return float(self.lam[0])

    @property
    def phi1(self) -> np.ndarray:
        return self.phi[:, 0]

    def eigenfunction(self, k: int, j: int = 1) -> np.ndarray:
        """phi_j^(k), both indices 1-based."""
        return self.phi[:, self.basis_index(k, j)]

    def basis_index(self, k: int, j: int = 1) -> int:
        if not 1 <= k <= len(self.groups):
            raise IndexError(f"eigenvalue index k={k} out of range 1..{len(self.groups)}")
        g = self.groups[k - 1]
        if not 1 <= j <= len(g):
            raise IndexError(f"eigenfunction index j={j} out of range 1..{len(g)} for k={k}")
        return int(g[j - 1])

    def coeffs(self, f) -> np.ndarray:
        """Coefficients <f, phi_p>_m for every basis vector p."""
        return self.phi.T @ (self.m * np.asarray(f, dtype=float))

    def inner(self, f, g) -> float:
        return float(np.sum(np.asarray(f) * np.asarray(g) * self.m))


def _fix_sign(v: np.ndarray) -> np.ndarray:
    big = np.max(np.abs(v))
    idx = int(np.argmax(np.abs(v) >= big * (1.0 - 1e-9)))
    return -v if v[idx] < 0 else v


def build_spectral(scenario: Scenario) -> SpectralSystem:
    m = np.asarray(scenario.m, dtype=float)
    L = scenario.L
    s = np.sqrt(m)
    S = (s[:, None] * L) / s[None, :]
    S = 0.5 * (S + S.T)
    try:
        w, U = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"eigen-decomposition failed to converge: {exc}") from None
    order = np.argsort(-w, kind="stable")
    lam = -w[order]
    phi = U[:, order] / s[:, None]

    groups: list[list[int]] = []
    for p in range(len(lam)):
        if groups and _close(lam[groups[-1][0]], lam[p]):
            groups[-1].append(p)
        else:
            groups.append([p])
    # pooled eigenvalue: one representative value per cluster
    for g in groups:
        lam[g] = np.mean(lam[g])

    for p in range(len(lam)):
        phi[:, p] = _fix_sign(phi[:, p])
    if len(groups[0]) > 1 or np.any(phi[:, 0] <= 0):
        raise SpectralError("principal eigenfunction not positive (reducible generator?)")

    G = phi.T @ (m[:, None] * phi)
    resid = float(np.max(np.abs(G - np.eye(len(m)))))
    if resid > 1e-10:
        raise SpectralError(f"m-orthonormality residual {resid:.3g} exceeds 1e-10")
    phi.setflags(write=False)
    lam.setflags(write=False)
    return SpectralSystem(m=m, L=L, lam=lam, phi=phi,
                          groups=tuple(np.array(g) for g in groups))


def semigroup_apply(sys: SpectralSystem, t: float, f) -> np.ndarray:
    if t < 0:
        raise ValueError("t must be nonnegative")
    f = np.asarray(f, dtype=float)
    if t == 0:
        return f.copy()
    return sys.phi @ (np.exp(-sys.lam * t) * sys.coeffs(f))


def heat_kernel(sys: SpectralSystem, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Density q_t(x, y) of T_t w.r.t. m, and its diagonal a_t(x)."""
    if not t > 0:
        raise ValueError("t must be positive")
    q = (sys.phi * np.exp(-sys.lam * t)) @ sys.phi.T
    q = 0.5 * (q + q.T)
    return q, np.diag(q).copy()


@dataclass(frozen=True)
class FunctionProfile:
    f: np.ndarray
    coeffs: np.ndarray       # per basis vector
    gamma: float             # 1-based index of the leading eigenvalue, inf for f = 0
    f1: np.ndarray
    space_class: str         # C_l, C_c, C_s, mixed or zero
    margin: float            # 2 lambda_gamma - lambda_1 (nan for f = 0)
    name: str = ""

    @property
    def is_zero(self) -> bool:
        return self.space_class == "zero"


def eigen_regime(sys: SpectralSystem, k: int) -> str:
    """'large' (2 lambda_k < lambda_1), 'critical' or 'small' for distinct eigenvalue k."""
    lk = sys.eigenvalues[k - 1]
    l1 = sys.lambda1
    if _close(2.0 * lk, l1):
        return "critical"
    return "large" if 2.0 * lk < l1 else "small"


def profile_function(sys: SpectralSystem, f, name: str = "") -> FunctionProfile:
    f = np.asarray(f, dtype=float)
    a = sys.coeffs(f)
    scale = max(math.sqrt(sys.inner(f, f)), np.finfo(float).tiny)
    nonzero = [k for k, g in enumerate(sys.groups, start=1)
               if np.any(np.abs(a[g]) > COEFF_RTOL * scale)]
    # drop roundoff-level coefficients: paired with a component growing like
    # e^{-lambda_1 t} they would swamp the subdominant signal
    a = a.copy()
    for k, g in enumerate(sys.groups, start=1):
        if k not in nonzero:
            a[g] = 0.0
    if not nonzero or not np.any(f != 0):
        return FunctionProfile(f=f, coeffs=a, gamma=math.inf, f1=np.zeros_like(f),
                               space_class="zero", margin=math.nan, name=name)
    gam = nonzero[0]
    g = sys.groups[gam - 1]
    f1 = sys.phi[:, g] @ a[g]
    regimes = {eigen_regime(sys, k) for k in nonzero}
    if regimes == {"large"}:
        cls = "C_l"
    elif regimes == {"critical"}:
        cls = "C_c"
    elif eigen_regime(sys, gam) == "small":
        cls = "C_s"
    else:
        cls = "mixed"
    margin = 2.0 * sys.eigenvalues[gam - 1] - sys.lambda1
    return FunctionProfile(f=f, coeffs=a, gamma=float(gam), f1=f1, space_class=cls,
                           margin=float(margin), name=name)


def leading_flow(sys: SpectralSystem, g_profile: FunctionProfile, s: float) -> np.ndarray:
    """I_s g = sum over large eigenvalues of e^{lambda_k s} a_j^k phi_j^(k)."""
    if g_profile.space_class != "C_l":
        raise ValueError(f"leading_flow needs a C_l function, got {g_profile.space_class}")
    return sys.phi @ (np.exp(sys.lam * s) * g_profile.coeffs)


def resolve_function(sys: SpectralSystem, spec) -> tuple[str, np.ndarray]:
    """Turn 'one', 'phiK', 'phiK_J' or a literal vector into (name, vector)."""
    if not isinstance(spec, str):
        vec = np.asarray(spec, dtype=float)
        return "custom", vec
    s = spec.strip()
    if s in ("1", "one"):
        return "one", np.ones(sys.n)
    if s.startswith("phi"):
        parts = s[3:].split("_")
        try:
            k = int(parts[0])
            j = int(parts[1]) if len(parts) > 1 else 1
        except ValueError:
            raise ValueError(f"cannot parse function name {spec!r}") from None
        return s, sys.eigenfunction(k, j).copy()
    try:
        vec = np.array([float(x) for x in s.strip("[]").split(",")])
    except ValueError:
        raise ValueError(f"cannot parse function {spec!r}: expected one, phiK[_J] or a comma list") from None
    if vec.shape[0] != sys.n:
        raise ValueError(f"function {spec!r} has {vec.shape[0]} entries, expected {sys.n}")
    return "custom", vec

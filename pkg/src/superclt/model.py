"""Finite-state scenario definition: spatial chain, branching and immigration data.

Sites are labelled 1..n in files and messages; arrays are 0-based internally.
Functions on E are plain length-n vectors, measures on E are length-n vectors of
site masses, and the pairing <f, mu> is the plain dot product.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


class ScenarioError(ValueError):
    """Malformed scenario input (bad shape, missing key, unparsable file)."""


def _vec(value, n: int | None, name: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{name}: expected a numeric array ({exc})") from None
    if arr.ndim != 1:
        raise ScenarioError(f"{name}: expected a 1-d array, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ScenarioError(f"{name}: dimension mismatch, expected {n} entries, got {arr.shape[0]}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StateSpace:
    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", _vec(self.m, None, "space.m"))
        if self.m.shape[0] < 1:
            raise ScenarioError("space.m: need at least one site")

    @property
    def n(self) -> int:
        return self.m.shape[0]


@dataclass(frozen=True)
class Generator:
    Q: np.ndarray

    def __post_init__(self):
        try:
            Q = np.array(self.Q, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"generator.Q: expected a numeric matrix ({exc})") from None
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ScenarioError(f"generator.Q: expected a square matrix, got shape {Q.shape}")
        Q.setflags(write=False)
        object.__setattr__(self, "Q", Q)


@dataclass(frozen=True)
class BranchingLaw:
    """Local branching data; ``jump_atoms[i]`` lists (y, rate) pairs of n(x_i, dy)."""

    beta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    jump_atoms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "beta", _vec(self.beta, None, "branching.beta"))
        n = self.beta.shape[0]
        object.__setattr__(self, "a", _vec(self.a, n, "branching.a"))
        object.__setattr__(self, "b", _vec(self.b, n, "branching.b"))
        atoms = tuple(self.jump_atoms) if self.jump_atoms else tuple(() for _ in range(n))
        if len(atoms) != n:
            raise ScenarioError(f"branching.jump_atoms: expected {n} per-site lists, got {len(atoms)}")
        atoms = tuple(tuple((float(y), float(r)) for y, r in site) for site in atoms)
        object.__setattr__(self, "jump_atoms", atoms)

    @property
    def alpha(self) -> np.ndarray:
        return self.beta * self.a

    @property
    def jump_second_moment(self) -> np.ndarray:
        """Per-site sum of r * y^2 over the jump atoms."""
        return np.array([sum(r * y * y for y, r in site) for site in self.jump_atoms])

    @property
    def jump_first_moment(self) -> np.ndarray:
        return np.array([sum(r * y for y, r in site) for site in self.jump_atoms])

    @property
    def A(self) -> np.ndarray:
        return self.beta * (2.0 * self.b + self.jump_second_moment)

    def psi0(self, lam: np.ndarray) -> np.ndarray:
        """psi_0(x, lam) = b lam^2 + sum_k r_k (exp(-lam y_k) - 1 + lam y_k), per site."""
        lam = np.asarray(lam, dtype=float)
        out = self.b * lam * lam
        for i, site in enumerate(self.jump_atoms):
            for y, r in site:
                out[i] += r * compensated_exp(lam[i] * y)
        return out


def compensated_exp(z):
    """exp(-z) - 1 + z, accurate for small |z|."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-3
    zs = np.where(small, z, 0.0)
    series = zs * zs * (0.5 - zs * (1.0 / 6.0 - zs * (1.0 / 24.0 - zs / 120.0)))
    return np.where(small, series, np.expm1(-np.where(small, 0.0, z)) + z)


@dataclass(frozen=True)
class ImmigrationLaw:
    """Immigration: drift measure ``eta`` plus atoms ``(nu_j, rate_j)`` of H."""

    eta: np.ndarray
    H_atoms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "eta", _vec(self.eta, None, "immigration.eta"))
        n = self.eta.shape[0]
        atoms = []
        for j, (nu, rate) in enumerate(self.H_atoms):
            atoms.append((_vec(nu, n, f"immigration.H_atoms[{j}].nu"), float(rate)))
        object.__setattr__(self, "H_atoms", tuple(atoms))

    @property
    def measure(self) -> np.ndarray:
        """The measure Gamma(dx) = eta + sum_j rate_j nu_j."""
        out = np.array(self.eta, dtype=float)
        for nu, rate in self.H_atoms:
            out = out + rate * nu
        return out

    def gamma(self, f) -> float:
        return float(self.measure @ np.asarray(f, dtype=float))

    def phi(self, g) -> float:
        """The immigration functional <eta, g> + sum_j rate_j (1 - exp(-<nu_j, g>))."""
        g = np.asarray(g, dtype=float)
        out = float(self.eta @ g)
        for nu, rate in self.H_atoms:
            out -= rate * math.expm1(-float(nu @ g))
        return out

    @property
    def nu_matrix(self) -> np.ndarray:
        n = self.eta.shape[0]
        if not self.H_atoms:
            return np.zeros((0, n))
        return np.array([nu for nu, _ in self.H_atoms])

    @property
    def rates(self) -> np.ndarray:
        return np.array([rate for _, rate in self.H_atoms], dtype=float)

    @property
    def present(self) -> bool:
        return bool(np.any(self.eta != 0) or any(r > 0 for _, r in self.H_atoms))


@dataclass(frozen=True, eq=False)
class Scenario:
    space: StateSpace
    generator: Generator
    branching: BranchingLaw
    immigration: ImmigrationLaw
    mu0: np.ndarray
    name: str = ""

    def __post_init__(self):
        n = self.space.n
        if self.generator.Q.shape != (n, n):
            raise ScenarioError(f"generator.Q: dimension mismatch, expected {n}x{n}, got {self.generator.Q.shape}")
        if self.branching.beta.shape[0] != n:
            raise ScenarioError(
                f"branching.beta: dimension mismatch, expected {n} entries, got {self.branching.beta.shape[0]}")
        if self.immigration.eta.shape[0] != n:
            raise ScenarioError(
                f"immigration.eta: dimension mismatch, expected {n} entries, got {self.immigration.eta.shape[0]}")
        object.__setattr__(self, "mu0", _vec(self.mu0, n, "initial.mu"))

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def m(self) -> np.ndarray:
        return self.space.m

    @property
    def L(self) -> np.ndarray:
        """Generator of the mean semigroup acting on functions: Q + diag(alpha)."""
        return self.generator.Q + np.diag(self.branching.alpha)

    def to_dict(self) -> dict[str, Any]:
        jump = [[i + 1, y, r] for i, site in enumerate(self.branching.jump_atoms) for y, r in site]
        return {
            "name": self.name,
            "space": {"n": self.n, "m": self.m.tolist()},
            "generator": {"Q": self.generator.Q.tolist()},
            "branching": {
                "beta": self.branching.beta.tolist(),
                "a": self.branching.a.tolist(),
                "b": self.branching.b.tolist(),
                "jump_atoms": jump,
            },
            "immigration": {
                "eta": self.immigration.eta.tolist(),
                "H_atoms": [{"nu": nu.tolist(), "rate": rate} for nu, rate in self.immigration.H_atoms],
            },
            "initial": {"mu": self.mu0.tolist()},
        }

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None

    def digest(self) -> str:
        """Stable content hash (ignores the display name)."""
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_(self, **changes) -> "Scenario":
        """Copy with selected top-level fields or branching/immigration arrays replaced."""
        br = self.branching
        im = self.immigration
        br_keys = {"beta", "a", "b", "jump_atoms"}
        im_keys = {"eta", "H_atoms"}
        if br_keys & changes.keys():
            br = BranchingLaw(**{k: changes.pop(k, getattr(br, k)) for k in ("beta", "a", "b", "jump_atoms")})
        if im_keys & changes.keys():
            im = ImmigrationLaw(**{k: changes.pop(k, getattr(im, k)) for k in ("eta", "H_atoms")})
        kw = dict(space=self.space, generator=self.generator, branching=br, immigration=im,
                  mu0=self.mu0, name=self.name)
        if "m" in changes:
            kw["space"] = StateSpace(changes.pop("m"))
        if "Q" in changes:
            kw["generator"] = Generator(changes.pop("Q"))
        if "mu" in changes:
            kw["mu0"] = changes.pop("mu")
        kw.update(changes)
        return Scenario(**kw)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    M: float = math.nan
    gamma_total: float = math.nan
    H_second_moment: float = math.nan
    lambda1: float = math.nan
    supercritical: bool = False
    warnings: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "pass": self.passed,
            "violations": list(self.violations),
            "warnings": list(self.warnings),
            "M": self.M,
            "gamma_total": self.gamma_total,
            "H_second_moment": self.H_second_moment,
            "lambda1": self.lambda1,
            "supercritical": self.supercritical,
        }


def derived_coefficients(scenario: Scenario) -> tuple[np.ndarray, np.ndarray, float]:
    br = scenario.branching
    alpha = br.alpha
    A = br.A
    M = float(np.max(np.abs(alpha) + A)) if alpha.size else 0.0
    return alpha, A, M


def _principal_lambda(scenario: Scenario, symmetric: bool) -> float:
    L = scenario.L
    if symmetric:
        s = np.sqrt(scenario.m)
        S = (s[:, None] * L) / s[None, :]
        top = np.linalg.eigvalsh(0.5 * (S + S.T))[-1]
    else:
        top = np.max(np.linalg.eigvals(L).real)
    return float(-top)


def validate(scenario: Scenario) -> ValidationReport:
    """Check every structural invariant; problems are reported, not raised."""
    rep = ValidationReport()
    v = rep.violations
    n = scenario.n
    m = scenario.m
    Q = scenario.generator.Q
    br = scenario.branching
    im = scenario.immigration

    if np.any(~np.isfinite(m)) or np.any(m <= 0):
        v.append("m must be strictly positive (full support)")
    tol = 1e-12 * max(1.0, float(np.max(np.abs(Q))) if Q.size else 1.0)
    for i in range(n):
        for j in range(n):
            if i != j and Q[i, j] < 0:
                v.append(f"negative jump rate Q[{i + 1},{j + 1}]")
    rows = Q.sum(axis=1)
    for i in np.nonzero(rows > tol)[0]:
        v.append(f"row sum of Q at site {i + 1} is positive ({rows[i]:.3g})")
    symmetric = True
    for i in range(n):
        for j in range(i + 1, n):
            if abs(m[i] * Q[i, j] - m[j] * Q[j, i]) > tol * max(1.0, m[i], m[j]):
                v.append(f"m-symmetry failed at ({i + 1},{j + 1})")
                symmetric = False

    if np.any(br.beta < 0):
        v.append("beta must be nonnegative")
    if np.any(br.b < 0):
        v.append("b must be nonnegative")
    for i, site in enumerate(br.jump_atoms):
        for y, r in site:
            if not y > 0:
                v.append(f"jump atom mass must be positive at site {i + 1}")
            if r < 0:
                v.append(f"negative jump atom rate at site {i + 1}")
    if np.any(im.eta < 0):
        v.append("eta must be nonnegative")
    for j, (nu, rate) in enumerate(im.H_atoms):
        if np.any(nu < 0):
            v.append(f"H atom {j + 1} has a negative mass")
        if not np.any(nu > 0):
            v.append(f"H atom {j + 1} is the null measure")
        if not rate > 0:
            v.append(f"H atom {j + 1} rate must be positive")
    if np.any(scenario.mu0 < 0):
        v.append("initial measure mu must be nonnegative")
    for name, arr in (("beta", br.beta), ("a", br.a), ("b", br.b), ("eta", im.eta), ("mu", scenario.mu0)):
        if np.any(~np.isfinite(arr)):
            v.append(f"{name} must be finite")

    _, _, M = derived_coefficients(scenario)
    rep.M = M
    rep.gamma_total = float(im.eta.sum() + sum(rate * nu.sum() for nu, rate in im.H_atoms))
    rep.H_second_moment = float(sum(rate * nu.sum() ** 2 for nu, rate in im.H_atoms))
    if np.all(np.isfinite(Q)) and np.all(np.isfinite(br.alpha)) and np.all(m > 0):
        rep.lambda1 = _principal_lambda(scenario, symmetric)
        rep.supercritical = rep.lambda1 < 0
        if not rep.supercritical:
            rep.warnings.append(f"not supercritical: lambda1 = {rep.lambda1:.6g} >= 0")
    return rep


# -- file I/O ---------------------------------------------------------------

def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict):
        raise ScenarioError(f"{where}: expected an object")
    if key not in d:
        raise ScenarioError(f"missing key {where + '.' if where else ''}{key}")
    return d[key]


def scenario_from_dict(d: dict[str, Any]) -> Scenario:
    space = _require(d, "space", "")
    n = _require(space, "n", "space")
    if not isinstance(n, int) or n < 1:
        raise ScenarioError("space.n: expected a positive integer")
    m = _vec(_require(space, "m", "space"), n, "space.m")
    Q = _require(_require(d, "generator", ""), "Q", "generator")
    gen = Generator(Q)
    if gen.Q.shape != (n, n):
        raise ScenarioError(f"generator.Q: dimension mismatch, expected {n}x{n}, got {gen.Q.shape}")
    br = _require(d, "branching", "")
    beta = _vec(_require(br, "beta", "branching"), n, "branching.beta")
    a = _vec(_require(br, "a", "branching"), n, "branching.a")
    b = _vec(_require(br, "b", "branching"), n, "branching.b")
    atoms: list[list[tuple[float, float]]] = [[] for _ in range(n)]
    for k, entry in enumerate(br.get("jump_atoms", [])):
        if len(entry) != 3:
            raise ScenarioError(f"branching.jump_atoms[{k}]: expected [site, y, rate]")
        site, y, r = entry
        if not isinstance(site, int) or not 1 <= site <= n:
            raise ScenarioError(f"branching.jump_atoms[{k}]: site must be an integer in 1..{n}")
        atoms[site - 1].append((float(y), float(r)))
    im = _require(d, "immigration", "")
    eta = _vec(_require(im, "eta", "immigration"), n, "immigration.eta")
    H = []
    for k, entry in enumerate(im.get("H_atoms", [])):
        nu = _vec(_require(entry, "nu", f"immigration.H_atoms[{k}]"), n, f"immigration.H_atoms[{k}].nu")
        H.append((nu, float(_require(entry, "rate", f"immigration.H_atoms[{k}]"))))
    mu = _vec(_require(_require(d, "initial", ""), "mu", "initial"), n, "initial.mu")
    return Scenario(
        space=StateSpace(m),
        generator=gen,
        branching=BranchingLaw(beta, a, b, tuple(tuple(s) for s in atoms)),
        immigration=ImmigrationLaw(eta, tuple(H)),
        mu0=mu,
        name=str(d.get("name", "")),
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read scenario ({exc.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        scen = scenario_from_dict(data)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    if not scen.name:
        scen = scen.with_(name=path.stem)
    return scen


def save_scenario(scenario: Scenario, path) -> None:
    # json writes floats with repr(), which round-trips bit-exactly
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2) + "\n", encoding="utf-8")

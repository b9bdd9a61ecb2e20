"""Canonical scenarios used by the battery, the tests and the shipped config files."""
from __future__ import annotations

import re

import numpy as np

from .model import BranchingLaw, Generator, ImmigrationLaw, Scenario, StateSpace


def s1() -> Scenario:
    """One site, quadratic branching, drift immigration 0.2: lambda1 = -0.5."""
    return Scenario(
        space=StateSpace([1.0]),
        generator=Generator([[0.0]]),
        branching=BranchingLaw(beta=[1.0], a=[0.5], b=[0.5]),
        immigration=ImmigrationLaw(eta=[0.2]),
        mu0=[1.0],
        name="S1",
    )


def s2(alpha_hat: float) -> Scenario:
    """Two symmetric sites with a = alpha_hat: lambda1 = -alpha_hat, lambda2 = 2 - alpha_hat.

    The initial measure and the drift immigration are swap-symmetric, so every
    odd functional of phi2 has mean zero.
    """
    a = float(alpha_hat)
    return Scenario(
        space=StateSpace([1.0, 1.0]),
        generator=Generator([[-1.0, 1.0], [1.0, -1.0]]),
        branching=BranchingLaw(beta=[1.0, 1.0], a=[a, a], b=[0.5, 0.5]),
        immigration=ImmigrationLaw(eta=[0.2, 0.2]),
        mu0=[1.0, 1.0],
        name=f"S2({a:g})",
    )


def s3() -> Scenario:
    """Three sites with unequal weights, killing, branching jumps and H atoms."""
    m = np.array([1.0, 2.0, 0.5])
    K = np.array([[0.0, 1.0, 0.5], [1.0, 0.0, 0.8], [0.5, 0.8, 0.0]])
    Q = K / m[:, None]
    Q[np.diag_indices(3)] = -Q.sum(axis=1)
    Q[2, 2] -= 0.2
    return Scenario(
        space=StateSpace(m),
        generator=Generator(Q),
        branching=BranchingLaw(
            beta=[1.0, 0.8, 1.2],
            a=[0.6, 0.4, 0.5],
            b=[0.3, 0.2, 0.4],
            jump_atoms=(((0.5, 0.4), (1.5, 0.1)), (), ((1.0, 0.3),)),
        ),
        immigration=ImmigrationLaw(
            eta=[0.1, 0.0, 0.05],
            H_atoms=(([0.5, 0.2, 0.0], 0.3), ([0.0, 0.0, 1.0], 0.1)),
        ),
        mu0=[0.5, 1.0, 0.2],
        name="S3",
    )


def deterministic() -> Scenario:
    """S2(1) without noise or immigration (A = 0, eta = 0): paths are the mean flow."""
    return Scenario(
        space=StateSpace([1.0, 1.0]),
        generator=Generator([[-1.0, 1.0], [1.0, -1.0]]),
        branching=BranchingLaw(beta=[1.0, 1.0], a=[1.0, 1.0], b=[0.0, 0.0]),
        immigration=ImmigrationLaw(eta=[0.0, 0.0]),
        mu0=[1.0, 1.0],
        name="D",
    )


CANONICAL = {
    "S1": s1,
    "S2a1": lambda: s2(1.0),
    "S2a4": lambda: s2(4.0),
    "S2a5": lambda: s2(5.0),
    "S3": s3,
    "D": deterministic,
}


def canonical(name: str) -> Scenario:
    """Look up a canonical scenario; accepts ``S2a4`` and ``S2(4)`` spellings."""
    m = re.fullmatch(r"S2\((\d+(?:\.\d*)?)\)", name)
    if m:
        return s2(float(m.group(1)))
    try:
        return CANONICAL[name]()
    except KeyError:
        raise KeyError(f"unknown canonical scenario {name!r}; known: {sorted(CANONICAL)}") from None

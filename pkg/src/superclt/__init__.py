"""Supercritical superprocesses with immigration on a finite state space.

Exact moments, Laplace functionals and limit constants; Monte Carlo paths; and
statistical checks of the martingale property, the L^2 law of large numbers and
the joint central limit theorem.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .model import Scenario, ScenarioError, load_scenario, save_scenario, validate  # noqa: E402
from .spectral import SpectralSystem, build_spectral, profile_function  # noqa: E402

__all__ = ["Scenario", "ScenarioError", "SpectralSystem", "__version__", "build_spectral", "load_scenario",
           "profile_function", "save_scenario", "validate"]

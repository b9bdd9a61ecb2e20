"""Frozen output layout. Bump SCHEMA_VERSION whenever a column or key changes.

The human-readable description lives in docs/schema.md; tests check the two agree.
A column containing ``{i}`` repeats once per site (1-based), ``{t}`` once per
snapshot time (formatted with ``%g``). CLT columns other than ``replicate`` and
``W_hat`` appear only for the functions that were tested.
"""
from __future__ import annotations

SCHEMA_VERSION = "1.1.0"

CSV_COLUMNS = {
    "laplace": ["t", "theta", "f_name", "exact_laplace"],
    "moments": ["t", "f_name", "mean", "second", "variance", "term1", "term2", "term3", "term4"],
    "simulate": ["replicate", "stream_id", "t", "y_{i}", "z_{i}"],
    "martingale-test": ["replicate", "H_t={t}", "slope"],
    "lln-test": ["replicate", "W_proxy"],
    "clt-test": ["replicate", "W_hat", "U_f", "U_g", "U_h"],
    "battery-summary": ["test", "scenario", "pass", "detail"],
}

JSON_KEYS = {
    "validate": ["schema_version", "pass", "violations", "warnings", "M", "gamma_total",
                 "H_second_moment", "lambda1", "supercritical"],
    # one object per line
    "spectral": ["schema_version", "k", "lambda", "multiplicity", "phi1_min", "phi1_max"],
    "clt-constants": ["schema_version", "sigma2", "rho2", "beta2", "mean_W", "var_W", "gamma_phi1", "lambda1"],
    "verdict": ["schema_version", "test", "inputs", "statistics", "thresholds", "checks", "pass"],
    "battery": ["schema_version", "seed", "scenarios", "results", "pass"],
    "manifest": ["schema_version", "subcommand", "scenario_hash", "flags", "master_seed", "artifact_version",
                 "scheme_version", "started", "finished", "outputs", "exit_code"],
}


def expand_columns(kind: str, n_sites: int = 0, times=()) -> list[str]:
    """Concrete header for ``kind`` with the per-site and per-time columns filled in."""
    out = []
    per_site = []
    for col in CSV_COLUMNS[kind]:
        if "{i}" in col:
            per_site.append(col)
        elif "{t}" in col:
            out.extend(col.replace("{t}", f"{t:g}") for t in times)
        else:
            out.append(col)
    for col in per_site:
        out.extend(col.replace("{i}", str(i + 1)) for i in range(n_sites))
    return out

"""Command-line entry point: ``superclt <subcommand> ...``.

Exit codes: 0 pass, 1 test failure or refusal, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import battery as bat
from .analyze import Refusal, Verdict, clt_test, lln_test, martingale_test
from .cumulant import StiffnessError, laplace_Y_grid
from .io import OutputConflict, RunManifest, csv_text, json_text, output_stem, write_result
from .model import ScenarioError, load_scenario, validate
from .moments import clt_constants, martingale_constants, second_moment_Y
from .scenarios import canonical
from .schema import CSV_COLUMNS, SCHEMA_VERSION, expand_columns
from .simulate import SCHEME_VERSION, SimConfig, simulate_ensemble
from .spectral import SpectralError, build_spectral, profile_function, resolve_function

DEFAULT_OUT = "superclt-out"
BATTERY_SET = ("S1", "S2a1", "S2a4", "S2a5")
_MODES = {"full": "full", "native": "native_only", "native_only": "native_only",
          "immigration": "immigration_only", "immigration_only": "immigration_only"}


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="superclt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="subcommand")

    def scen(sp):
        sp.add_argument("scenario", nargs="?", help="scenario file (JSON)")
        sp.add_argument("--scenario", dest="scenario_opt", metavar="PATH", help="scenario file (JSON)")

    def out(sp, default=None):
        sp.add_argument("--out", default=default, metavar="DIR",
                        help="output directory" + (f" (default {default})" if default else ""))

    def sim(sp, replicates, dt, snapshots):
        sp.add_argument("--seed", type=_seed, default=0)
        sp.add_argument("--replicates", type=_positive_int, default=replicates)
        sp.add_argument("--dt", type=float, default=dt)
        if snapshots is not None:
            sp.add_argument("--snapshots", type=_floats, default=snapshots, metavar="T1,T2,...")

    sp = sub.add_parser("validate", help="check a scenario and print derived constants")
    scen(sp)
    out(sp)
    sp.add_argument("--json", action="store_true", help="print the JSON report")

    sp = sub.add_parser("spectral", help="eigenvalue table as JSON lines")
    scen(sp)
    out(sp)

    sp = sub.add_parser("laplace", help="exact E exp(-theta <f, Y_t>)")
    scen(sp)
    out(sp)
    sp.add_argument("--f", default="one", help="one, phiK, phiK_J or a comma list")
    sp.add_argument("--theta", type=_floats, default=(0.25, 1.0, 4.0), metavar="TH1,TH2,...")
    sp.add_argument("--t", type=_floats, default=(1.0,), metavar="T1,T2,...")

    sp = sub.add_parser("moments", help="exact mean, second moment and variance terms")
    scen(sp)
    out(sp)
    sp.add_argument("--f", action="append", help="test function (repeatable; default one and phi1)")
    sp.add_argument("--t", type=_floats, default=(1.0,), metavar="T1,T2,...")

    sp = sub.add_parser("clt-constants", help="limit-law constants as JSON")
    scen(sp)
    out(sp)
    for name in ("f", "h", "g"):
        sp.add_argument(f"--{name}", default=None)

    sp = sub.add_parser("simulate", help="Monte Carlo ensemble to CSV")
    scen(sp)
    out(sp, DEFAULT_OUT)
    sim(sp, 1000, 0.01, (1.0,))
    sp.add_argument("--mode", default="full", choices=sorted(_MODES))

    sp = sub.add_parser("martingale-test", help="check that H_t^{k,j} is a martingale")
    scen(sp)
    out(sp, DEFAULT_OUT)
    sim(sp, 20_000, 0.005, (1.0, 2.0, 4.0, 8.0))
    sp.add_argument("--k", type=_positive_int, default=1)
    sp.add_argument("--j", type=_positive_int, default=1)
    sp.add_argument("--negative-control", action="store_true", help="flip the sign of the correction")

    sp = sub.add_parser("lln-test", help="L^2 law of large numbers")
    scen(sp)
    out(sp, DEFAULT_OUT)
    sim(sp, 20_000, 0.005, (4.0, 8.0))
    sp.add_argument("--f", default="phi1")
    sp.add_argument("--lookahead", type=float, default=None, help="proxy horizon minus the last snapshot "
                                                                  "(default: the last snapshot)")

    sp = sub.add_parser("clt-test", help="joint central limit theorem")
    scen(sp)
    out(sp, DEFAULT_OUT)
    sim(sp, 50_000, 0.005, None)
    for name in ("f", "h", "g"):
        sp.add_argument(f"--{name}", default=None)
    sp.add_argument("--t", type=float, default=12.0)
    sp.add_argument("--lookahead", type=float, default=None, help="default: t (0 when only h is tested)")
    sp.add_argument("--negative-control", action="store_true", help="double the reference variance")

    sp = sub.add_parser("full-battery", help="every check on a scenario set")
    sp.add_argument("scenarios", nargs="*", help=f"scenario files (default: built-in {', '.join(BATTERY_SET)})")
    out(sp, DEFAULT_OUT)
    sp.add_argument("--seed", type=_seed, default=0)
    sp.add_argument("--replicates", type=_positive_int, default=None, help="override every Monte Carlo size")
    sp.add_argument("--no-bias-study", action="store_true")
    return p


# -- helpers ---------------------------------------------------------------------

def _load(args):
    path = args.scenario_opt or args.scenario
    if args.scenario_opt and args.scenario and args.scenario_opt != args.scenario:
        raise ConfigError("give the scenario either positionally or with --scenario, not both")
    if not path:
        raise ConfigError("a scenario file is required")
    return load_scenario(path)


def _flags(args) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())}


class _Outputs:
    """Collects output files for one run and writes the manifest at the end."""

    def __init__(self, args, subcommand: str, scenario_hash: str, seed, scheme: str | None = None):
        self.dir = None if args.out is None else Path(args.out)
        self.stem = output_stem(subcommand, scenario_hash, seed)
        self.manifest = RunManifest(subcommand, scenario_hash, _flags(args), seed, scheme)

    def write(self, suffix: str, text: str, stem: str | None = None) -> None:
        if self.dir is None:
            return
        path = write_result(self.dir / f"{stem or self.stem}{suffix}", text)
        self.manifest.outputs.append(path.name)

    def finish(self, code: int) -> int:
        if self.dir is not None:
            self.manifest.exit_code = code
            self.manifest.write(self.dir, self.stem)
        return code


def _table_csv(table: dict) -> str:
    cols = list(table)
    arrays = [np.asarray(table[c]) for c in cols]
    return csv_text(cols, zip(*[a.tolist() for a in arrays]))


def _emit_verdict(outs: _Outputs, v: Verdict, stem: str | None = None) -> None:
    outs.write(".json", json_text(v.to_dict()), stem)
    if v.table:
        outs.write(".csv", _table_csv(v.table), stem)


def _print_verdict(v: Verdict) -> None:
    for c in v.checks:
        print(f"  [{'ok' if c.passed else 'FAIL'}] {c.name} = {c.value:.6g} (threshold {c.threshold})")
    print(f"{v.test}: {'PASS' if v.passed else 'FAIL'}")


def _profile(sys, spec, label):
    if spec is None:
        return None
    name, vec = resolve_function(sys, spec)
    return profile_function(sys, vec, name if name != "custom" else label)


# -- subcommands -------------------------------------------------------------------

def cmd_validate(args) -> int:
    scen = _load(args)
    rep = validate(scen)
    outs = _Outputs(args, "validate", scen.digest(), None)
    doc = rep.to_dict()
    outs.write(".json", json_text(doc))
    if args.json:
        sys.stdout.write(json_text(doc))
    else:
        print(f"scenario {scen.name or '(unnamed)'} ({scen.n} sites)")
        print(f"lambda1={rep.lambda1:.12g}")
        print(f"M={rep.M:.12g}")
        print(f"Gamma(1)={rep.gamma_total:.12g}")
        print(f"H_second_moment={rep.H_second_moment:.12g}")
        print(f"supercritical={'yes' if rep.supercritical else 'no'}")
        for w in rep.warnings:
            print(f"warning: {w}")
        for v in rep.violations:
            print(f"violation: {v}")
        print("valid" if rep.passed else "INVALID")
    return outs.finish(0 if rep.passed else 1)


def _spectral_for(scen):
    rep = validate(scen)
    if not rep.passed:
        raise ConfigError("scenario is invalid: " + "; ".join(rep.violations))
    return build_spectral(scen)


def cmd_spectral(args) -> int:
    scen = _load(args)
    sys_ = _spectral_for(scen)
    lines = []
    for k, (lam, mult) in enumerate(zip(sys_.eigenvalues, sys_.multiplicities), start=1):
        lines.append(json.dumps({"schema_version": SCHEMA_VERSION, "k": k, "lambda": float(lam),
                                 "multiplicity": int(mult), "phi1_min": float(sys_.phi1.min()),
                                 "phi1_max": float(sys_.phi1.max())}, sort_keys=True))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    outs = _Outputs(args, "spectral", scen.digest(), None)
    outs.write(".jsonl", text)
    return outs.finish(0)


def cmd_laplace(args) -> int:
    scen = _load(args)
    sys_ = _spectral_for(scen)
    name, f = resolve_function(sys_, args.f)
    if np.any(f < 0):
        raise ConfigError("the Laplace functional needs a nonnegative f")
    if any(th < 0 for th in args.theta) or any(t < 0 for t in args.t):
        raise ConfigError("theta and t must be nonnegative")
    table = laplace_Y_grid(scen, sys_, f, args.theta, args.t)
    rows = [(t, th, name, table[i, j]) for j, t in enumerate(args.t) for i, th in enumerate(args.theta)]
    text = csv_text(CSV_COLUMNS["laplace"], rows)
    sys.stdout.write(text)
    outs = _Outputs(args, "laplace", scen.digest(), None)
    outs.write(".csv", text)
    return outs.finish(0)


def cmd_moments(args) -> int:
    scen = _load(args)
    sys_ = _spectral_for(scen)
    specs = args.f or ["one", "phi1"]
    rows = []
    for spec in specs:
        name, f = resolve_function(sys_, spec)
        for t in args.t:
            if t < 0:
                raise ConfigError("t must be nonnegative")
            mv = second_moment_Y(scen, sys_, f, t)
            rows.append((t, name, mv.mean, mv.second, mv.variance, *mv.terms))
    text = csv_text(CSV_COLUMNS["moments"], rows)
    sys.stdout.write(text)
    outs = _Outputs(args, "moments", scen.digest(), None)
    outs.write(".csv", text)
    return outs.finish(0)


def cmd_clt_constants(args) -> int:
    scen = _load(args)
    sys_ = _spectral_for(scen)
    try:
        c = clt_constants(scen, sys_, f=_profile(sys_, args.f, "f"), h=_profile(sys_, args.h, "h"),
                          g=_profile(sys_, args.g, "g"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    text = json_text(c.to_dict())
    sys.stdout.write(text)
    outs = _Outputs(args, "clt-constants", scen.digest(), None)
    outs.write(".json", text)
    return outs.finish(0)


def cmd_simulate(args) -> int:
    scen = _load(args)
    sys_ = _spectral_for(scen)
    cfg = SimConfig(args.dt, args.snapshots, args.replicates, args.seed, _MODES[args.mode])
    outs = _Outputs(args, f"simulate-{cfg.mode}", scen.digest(), args.seed, SCHEME_VERSION)
    ens = simulate_ensemble(scen, cfg, sys_)
    n = scen.n
    header = expand_columns("simulate", n_sites=n)
    rows = []
    for r in range(ens.replicates):
        for s, t in enumerate(ens.times):
            rows.append([r, ens.stream_id, float(t), *ens.Y[r, s].tolist(), *ens.Z[r, s].tolist()])
    outs.write(".csv", csv_text(header, rows))
    print(f"simulated {ens.replicates} replicates ({ens.failures} failed) to t={ens.times[-1]:g}")
    if outs.dir is not None:
        print(f"wrote {outs.dir / (outs.stem + '.csv')}")
    return outs.finish(0 if ens.failures == 0 else 1)


def cmd_martingale(args) -> int:
    scen = _load(args)
    sys_ = _spectral_for(scen)
    try:
        mc = martingale_constants(scen, sys_, args.k, args.j)
    except (ValueError, IndexError) as exc:
        raise Refusal(str(exc)) from None
    sub = "martingale-test" + ("-negative-control" if args.negative_control else "")
    outs = _Outputs(args, sub, scen.digest(), args.seed, SCHEME_VERSION)
    cfg = SimConfig(args.dt, args.snapshots, args.replicates, args.seed)
    ens = simulate_ensemble(scen, cfg, sys_)
    phi = sys_.eigenfunction(args.k, args.j)
    v = martingale_test(ens, sys_, args.k, args.j, scen.immigration.gamma(phi), mc.mean_H,
                        correction_sign=-1.0 if args.negative_control else 1.0)
    _emit_verdict(outs, v)
    _print_verdict(v)
    return outs.finish(0 if v.passed else 1)


def cmd_lln(args) -> int:
    scen = _load(args)
    sys_ = _spectral_for(scen)
    if len(args.snapshots) != 2:
        raise ConfigError("--snapshots must list exactly two horizons t1,t2")
    t1, t2 = args.snapshots
    L = t2 if args.lookahead is None else args.lookahead
    prof = _profile(sys_, args.f, "f")
    outs = _Outputs(args, "lln-test", scen.digest(), args.seed, SCHEME_VERSION)
    snaps = (t1, t2) if L == 0 else (t1, t2, t2 + L)
    cfg = SimConfig(args.dt, snaps, args.replicates, args.seed)
    ens = simulate_ensemble(scen, cfg, sys_)
    v = lln_test(ens, sys_, prof, t1, t2, t2 + L)
    _emit_verdict(outs, v)
    _print_verdict(v)
    return outs.finish(0 if v.passed else 1)


def cmd_clt(args) -> int:
    scen = _load(args)
    sys_ = _spectral_for(scen)
    f, h, g = (_profile(sys_, args.f, "f"), _profile(sys_, args.h, "h"), _profile(sys_, args.g, "g"))
    try:
        consts = clt_constants(scen, sys_, f=f, h=h, g=g)
    except ValueError as exc:
        raise Refusal(str(exc)) from None
    if args.negative_control:
        if f is not None and consts.sigma2_f:
            consts = dataclasses.replace(consts, sigma2_f=2.0 * consts.sigma2_f)
        elif g is not None and consts.beta2_g:
            consts = dataclasses.replace(consts, beta2_g=2.0 * consts.beta2_g)
        elif h is not None and consts.rho2_h:
            consts = dataclasses.replace(consts, rho2_h=2.0 * consts.rho2_h)
        else:
            raise ConfigError("negative control needs f, g or h with a nonzero limit variance")
    L = (0.0 if g is None else args.t) if args.lookahead is None else args.lookahead
    if g is not None and not L > 0:
        raise ConfigError("testing g needs a positive lookahead")
    snaps = (args.t,) if L == 0 else (args.t, args.t + L)
    sub = "clt-test" + ("-negative-control" if args.negative_control else "")
    outs = _Outputs(args, sub, scen.digest(), args.seed, SCHEME_VERSION)
    cfg = SimConfig(args.dt, snaps, args.replicates, args.seed)
    ens = simulate_ensemble(scen, cfg, sys_)
    v = clt_test(ens, sys_, consts, args.t, L, f=f, h=h, g=g)
    _emit_verdict(outs, v)
    _print_verdict(v)
    return outs.finish(0 if v.passed else 1)


def _set_hash(scenarios) -> str:
    h = hashlib.sha256()
    for s in scenarios:
        h.update(s.digest().encode())
    return h.hexdigest()


def cmd_full_battery(args) -> int:
    if args.scenarios:
        scenarios = [load_scenario(p) for p in args.scenarios]
    else:
        scenarios = [canonical(n) for n in BATTERY_SET]
    for s in scenarios:
        rep = validate(s)
        if not rep.passed:
            raise ConfigError(f"scenario {s.name} is invalid: " + "; ".join(rep.violations))
    plan = bat.BatteryPlan().with_replicates(args.replicates)
    outs = _Outputs(args, "full-battery", _set_hash(scenarios), args.seed, SCHEME_VERSION)
    code = 1
    try:
        report = bat.full_battery(scenarios, args.seed, plan, log=print, include_bias=not args.no_bias_study)
        by_name = {s.name: s for s in scenarios}
        for res in report.results:
            if res.verdict is None:
                continue
            digest = by_name[res.scenario].digest() if res.scenario in by_name else outs.stem.split("_")[1]
            label = re.sub(r"[^A-Za-z0-9.-]+", "-", f"{res.test}.{res.scenario}").strip("-")
            _emit_verdict(outs, res.verdict, output_stem(f"full-battery.{label}", digest, args.seed))
        outs.write(".json", json_text(report.to_dict()))
        outs.write(".csv", csv_text(CSV_COLUMNS["battery-summary"],
                                    [(r.test, r.scenario, r.passed, r.detail()) for r in report.results]))
        for r in report.refusals:
            print(f"refused: {r.test} on {r.scenario}: {r.refusal}")
        for r in report.skipped:
            print(f"skipped: {r.test} on {r.scenario}: {r.skipped}")
        print(f"full-battery: {'PASS' if report.passed else 'FAIL'} "
              f"({sum(r.passed for r in report.results)}/{len(report.results)} passed)")
        code = 0 if report.passed else 1
    finally:
        outs.finish(code)
    return code


COMMANDS = {
    "validate": cmd_validate,
    "spectral": cmd_spectral,
    "laplace": cmd_laplace,
    "moments": cmd_moments,
    "clt-constants": cmd_clt_constants,
    "simulate": cmd_simulate,
    "martingale-test": cmd_martingale,
    "lln-test": cmd_lln,
    "clt-test": cmd_clt,
    "full-battery": cmd_full_battery,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    try:
        return COMMANDS[args.command](args)
    except Refusal as exc:
        print(f"refused: {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ScenarioError, ConfigError, OutputConflict, SpectralError, StiffnessError,
            ValueError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``vanetchain {run,capacity,econ,disseminate,ledger}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .capacity import PER_KM2, REFERENCE_ROWS, CapacityParams, closed_form, monte_carlo_capacity
from .econ import GameParams, equilibrium
from .experiment import (CapacitySettings, EconSettings, ExperimentSpec, capacity_table, econ_table, load_spec,
                         run_experiment, validate_spec)
from .guard import GuardMode
from .ledger import read_ledger, verify_chain
from .pofl import ConsensusKind
from .seeding import derive_rng

log = logging.getLogger("vanetchain")


def _add_common(p: argparse.ArgumentParser, out_default: str | None = None) -> None:
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--reps", type=int, default=None, help="number of repetitions")
    p.add_argument("--out", default=out_default, help="output directory (default: stdout where possible)")


def _emit(text: str, out: str | None, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / name).write_text(text, encoding="utf-8", newline="\n")
    print(f"wrote {path / name}")


def cmd_run(args) -> int:
    spec = load_spec(args.spec)
    if args.reps is not None:
        spec = dataclasses.replace(spec, repetitions=args.reps, seeds=())
    if args.seed_given:
        spec = dataclasses.replace(spec, base_seed=args.seed, seeds=())
    findings = validate_spec(spec)
    if findings:
        for f in findings:
            print(f"invalid: {f}", file=sys.stderr)
        return 2
    outcome = run_experiment(spec, args.out or spec.output_dir)
    for name, path in outcome.files.items():
        print(f"wrote {path}")
    for f in outcome.failures:
        print(f"repetition {f['rep']} (seed {f['seed']}) failed: {f['error']}", file=sys.stderr)
    return 0 if outcome.ok else 1


def cmd_capacity(args) -> int:
    settings = CapacitySettings(ts=args.ts, runs=args.runs, density_scale=args.density_scale)
    if args.format == "json":
        rows = []
        for lam_v, lam_mb, mu_d in REFERENCE_ROWS:
            p = CapacityParams(lam_mb, args.ts, lam_v * args.density_scale, args.range, mu_d, args.mu_v)
            cf = closed_form(p)
            row = {"lambda_v": lam_v, "lambda_mb": lam_mb, "mu_d": mu_d, "ts": args.ts,
                   **dataclasses.asdict(cf)}
            if args.runs > 0:
                mc = monte_carlo_capacity(p, args.runs, derive_rng(args.seed, "capacity", lam_v))
                row["simulated_nb"] = [mc["nb"], mc["nb_std"]]
                row["simulated_nwb"] = [mc["nwb"], mc["nwb_std"]]
            rows.append(row)
        _emit(json.dumps(rows, indent=2, sort_keys=True) + "\n", args.out, "capacity.json")
        return 0
    report = capacity_table(settings, args.seed)
    _emit(report.render(f"# capacity ts={args.ts} runs={args.runs} seed={args.seed}"), args.out, "capacity.csv")
    return 0


def cmd_econ(args) -> int:
    incentives = tuple(float(x) for x in np.linspace(args.i_min, args.i_max, args.i_steps))
    settings = EconSettings(n=args.n, n_rly=args.n_rly, alpha=args.alpha, size=args.size,
                            betas=tuple(args.beta), incentives=incentives)
    report = econ_table(settings)
    text = report.render(f"# econ n={args.n} n_rly={args.n_rly} alpha={args.alpha}")
    for beta in args.beta:
        eq = equilibrium(GameParams.uniform(args.n, args.n_rly, args.alpha, beta))
        note = " (relay utility not positive)" if eq.flagged else ""
        print(f"beta={beta!r}: I*={eq.i_star!r} s*={eq.s_star[0]!r} U_rly={eq.u_relay!r}{note}", file=sys.stderr)
    _emit(text, args.out, "econ.csv")
    return 0


def cmd_disseminate(args) -> int:
    spec = load_spec(args.config) if args.config else ExperimentSpec(scenario="disseminate")
    reps = args.reps if args.reps is not None else spec.repetitions
    grid = dict(spec.grid)
    if args.vehicles:
        grid["num_vehicles"] = args.vehicles
    if args.malicious:
        grid["malicious_fraction"] = args.malicious
    if args.consensus:
        grid["consensus"] = [ConsensusKind(c) for c in args.consensus]
    if args.guard:
        grid["guard_mode"] = [GuardMode.parse(g) for g in args.guard]
    spec = dataclasses.replace(spec, grid=grid, repetitions=reps, seeds=(), base_seed=args.seed)
    findings = validate_spec(spec)
    if findings:
        for f in findings:
            print(f"invalid: {f}", file=sys.stderr)
        return 2
    outcome = run_experiment(spec, args.out or spec.output_dir)
    print(outcome.files["dissemination.csv"].read_text(encoding="utf-8"), end="")
    for f in outcome.failures:
        print(f"repetition {f['rep']} (seed {f['seed']}) failed: {f['error']}", file=sys.stderr)
    return 0 if outcome.ok else 1


def cmd_ledger_verify(args) -> int:
    try:
        ledger = read_ledger(args.file)
    except (OSError, ValueError) as exc:
        print(f"cannot read ledger: {exc}", file=sys.stderr)
        return 2
    report = verify_chain(ledger)
    print(f"checked {report.checked} blocks: {'PASS' if report.ok else 'FAIL'}")
    for f in report.findings:
        print(f"  {f.kind} #{f.index} {f.block_hash[:16]}: {f.reason}")
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vanetchain", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment spec (YAML or JSON)")
    p.add_argument("spec")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("capacity", help="expected and simulated upload counts per reference row")
    _add_common(p)
    p.add_argument("--ts", type=float, default=10.0, help="time slot in seconds")
    p.add_argument("--runs", type=int, default=10_000, help="Monte Carlo runs (0 disables)")
    p.add_argument("--range", type=float, default=250.0, help="transmission range in m")
    p.add_argument("--mu-v", type=float, default=50.0 / 3.6, help="mean speed in m/s")
    p.add_argument("--density-scale", type=float, default=PER_KM2,
                   help="multiplier turning the reference lambda_v into vehicles/m^2 (default: per km^2)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_capacity)

    p = sub.add_parser("econ", help="Stackelberg utilities over a (beta, I) grid")
    _add_common(p)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--n-rly", type=int, default=1)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--size", type=float, default=8000.0,
                   help="pinned per-vehicle data size for the fixed-size rows (0 disables them)")
    p.add_argument("--beta", type=float, action="append", default=None)
    p.add_argument("--i-min", type=float, default=0.0)
    p.add_argument("--i-max", type=float, default=30.0)
    p.add_argument("--i-steps", type=int, default=31)
    p.set_defaults(func=cmd_econ)

    p = sub.add_parser("disseminate", help="incident dissemination over a scenario grid")
    _add_common(p)
    p.add_argument("--config", help="experiment spec providing the base settings")
    p.add_argument("--consensus", action="append", choices=[c.value for c in ConsensusKind])
    p.add_argument("--vehicles", type=int, action="append")
    p.add_argument("--malicious", type=float, action="append")
    p.add_argument("--guard", action="append", choices=[g.value for g in GuardMode])
    p.set_defaults(func=cmd_disseminate)

    p = sub.add_parser("ledger", help="ledger utilities")
    lsub = p.add_subparsers(dest="ledger_command", required=True)
    v = lsub.add_parser("verify", help="recompute every hash and link of a ledger dump")
    v.add_argument("file")
    v.set_defaults(func=cmd_ledger_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.seed_given = "--seed" in argv or any(a.startswith("--seed=") for a in argv)
    if getattr(args, "command", None) == "econ" and args.beta is None:
        args.beta = [0.9e7, 1.8e7]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

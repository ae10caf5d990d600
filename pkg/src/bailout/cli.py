"""Command line entry point: ``bailout {fit,evaluate,sweep-alpha,oracle-check}``.

Exit codes: 0 success, 1 oracle check failed, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .copula import NotPositiveSemidefinite
from .harness import (ConfigError, ExperimentConfig, ReconstructionError, alpha_c_search,
                      build_network, fit_for_alpha, run_experiment)
from .network import CalibrationError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("bailout")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (YAML)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--network", help="builtin:kk, builtin:eba or a network file")
    common.add_argument("--scenario", choices=["baseline", "half-equity"])
    common.add_argument("--samples", type=int,
                        help="Monte Carlo samples per Bellman backup and per Q estimate")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bailout", description="Bank bailout MDP solver")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="fit the value function per alpha")
    sub.add_parser("evaluate", parents=[common],
                   help="fit and write Q / convenience tables")
    sub.add_parser("sweep-alpha", parents=[common], help="locate alpha_c by bisection")
    oc = sub.add_parser("oracle-check", parents=[common],
                        help="compare FVI with exact dynamic programming on tiny networks")
    oc.add_argument("--toys", type=int, default=20, help="number of random toy networks")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be non-negative")
        changes["seed"] = args.seed
    if args.out:
        changes["out"] = args.out
    if args.network:
        changes["network"] = args.network
    if args.scenario:
        changes["scenario"] = args.scenario
    if args.samples is not None:
        try:
            changes["solver"] = replace(cfg.solver, n_bellman=args.samples)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        changes["eval_samples"] = args.samples
    if changes:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **{
            k: v for k, v in changes.items() if k != "solver"}})
        if "solver" in changes:
            cfg = replace(cfg, solver=changes["solver"])
    return cfg


def cmd_fit(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, alpha in enumerate(cfg.alphas):
        run = fit_for_alpha(cfg, alpha, salt=k)
        path = out / f"policy_fit_alpha_{alpha:g}.json"
        run.fit.save(path)
        print(f"alpha={alpha:g}: wrote {path}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    for name, path in run_experiment(cfg).items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = run_experiment(replace(cfg, outputs=("alpha_c",)))
    with open(paths["alpha_c"]) as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    lo, hi = rows[1][4], rows[1][5]
    print(f"alpha_c in [{float(lo):.6g}, {float(hi):.6g}]  ({paths['alpha_c']})")
    return EXIT_OK


def cmd_oracle(cfg: ExperimentConfig, args) -> int:
    from .mdp import MdpState
    from .oracle import compare_with_fvi, random_toy

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    if args.network:
        net = build_network(cfg, cfg.alphas[0])
        cases.append(("network", MdpState(net, frozenset(), 0, cfg.mdp.horizon), cfg.mdp))
    else:
        for k in range(args.toys):
            s0, mcfg = random_toy(cfg.seed * 1000 + k, 2 + k % 2, 2 + k % 2)
            cases.append((f"toy{k}", s0, mcfg))
    solver = replace(cfg.solver, cross_action_defaults=True, n_action_variants=100)
    failed = 0
    with open(out / "oracle_check.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "action", "q_fvi", "se", "q_exact", "tolerance", "ok", "argmax_ok"])
        for name, s0, mcfg in cases:
            rows, argmax_ok, sol = compare_with_fvi(s0, mcfg, solver)
            for r in rows:
                w.writerow([name, r.label, repr(r.q_fvi), repr(r.se), repr(r.q_exact),
                            repr(r.tolerance), int(r.ok), int(argmax_ok)])
            ok = argmax_ok and all(r.ok for r in rows)
            failed += not ok
            print(f"{name}: {sol.n_states} states, V*={sol.v0:.6g} "
                  f"{'ok' if ok else 'MISMATCH'}")
            if name == "network":
                sol.write_csv(out / "oracle_table.csv")
    print(f"{len(cases) - failed}/{len(cases)} cases within tolerance")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "sweep-alpha":
            return cmd_sweep(cfg)
        return cmd_oracle(cfg, args)
    except (CalibrationError, NotPositiveSemidefinite, ReconstructionError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, yaml.YAMLError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

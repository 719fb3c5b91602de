"""Command-line interface.

Subcommands:

* ``run``: train R independent runs of a benchmark and write the
  per-checkpoint statistics table as CSV.
* ``oracle``: evaluate one of the independent reference solvers and print
  ``value +/- std_error``.
* ``consistency``: exact-coefficient scheme check; prints the empirical
  loss per step count and successive ratios.

Errors exit nonzero with a one-line JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np
import yaml

from . import oracles
from .problems import PROBLEM_NAMES, build_problem
from .scheme import bsb_consistency_losses
from .solver import config_digest, emit_csv, emit_loss_curves, run_experiment


def _parse_int_list(text):
    return [int(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deep2bsde")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a benchmark and emit a CSV table")
    run.add_argument("--problem", choices=PROBLEM_NAMES)
    run.add_argument("--config", help="problem config file (overrides --problem)")
    run.add_argument("--runs", type=int, default=10)
    run.add_argument("--seed", type=int, default=42)
    run.add_argument("--out", required=True)
    run.add_argument("--iters", type=int, default=None)
    run.add_argument("--batch", type=int, default=None)
    run.add_argument("--lr", type=float, default=None)
    run.add_argument("--lr-decay-factor", type=float, default=None)
    run.add_argument("--lr-decay-interval", type=int, default=None)
    run.add_argument("--epsilon", type=float, default=None)
    run.add_argument("--framework", choices=["specific", "general"], default=None)
    run.add_argument("--batch-norm", dest="use_batchnorm", action="store_true", default=None)
    run.add_argument("--no-batch-norm", dest="use_batchnorm", action="store_false")
    run.add_argument("--checkpoints", type=_parse_int_list, default=None)
    run.add_argument("--loss-curves", default=None,
                     help="also write per-run loss curves to this CSV")
    run.add_argument("--no-timing", action="store_true",
                     help="record runtimes as 0 so the CSV is byte-deterministic")
    run.add_argument("--workers", type=int, default=1)

    orc = sub.add_parser("oracle", help="evaluate an independent reference solver")
    orc.add_argument("name", choices=[
        "bsb-analytic", "gbm-analytic", "allen-cahn-branching", "hjb-cole-hopf", "gbm1d-fd",
    ])
    orc.add_argument("--d", type=int, default=None)
    orc.add_argument("--t", type=float, default=0.0)
    orc.add_argument("--horizon", type=float, default=None)
    orc.add_argument("--kappa", type=float, default=None)
    orc.add_argument("--samples", type=int, default=10_000_000)
    orc.add_argument("--seed", type=int, default=1)
    orc.add_argument("--x0", type=float, default=-2.0)
    orc.add_argument("--sigma-max", type=float, default=None)
    orc.add_argument("--sigma-min", type=float, default=1.0 / np.sqrt(2.0))
    orc.add_argument("--halfwidth", type=float, default=10.0)
    orc.add_argument("--points", type=int, default=2001)
    orc.add_argument("--steps", type=int, default=None)
    orc.add_argument("--cap", type=int, default=10_000)

    con = sub.add_parser("consistency", help="exact-coefficient scheme check")
    con.add_argument("--problem", default="bsb-100")
    con.add_argument("--grid", type=_parse_int_list, default=[10, 20, 40, 80])
    con.add_argument("--paths", type=int, default=1000)
    con.add_argument("--seed", type=int, default=2023)
    return p


def cmd_run(args) -> int:
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            raw = yaml.safe_load(fh)
        if not isinstance(raw, dict) or "problem" not in raw:
            raise ValueError(f"config {args.config} must be a mapping with a 'problem' key")
        name = raw.pop("problem")
        overrides.update(raw)
    else:
        if not args.problem:
            raise ValueError("either --problem or --config is required")
        name = args.problem
    if args.framework is not None:
        overrides["framework"] = args.framework
    for key, val in (
        ("J", args.batch), ("gamma", args.lr),
        ("lr_decay_factor", args.lr_decay_factor),
        ("lr_decay_interval", args.lr_decay_interval),
        ("epsilon", args.epsilon), ("use_batchnorm", args.use_batchnorm),
    ):
        if val is not None:
            overrides[key] = val
    stats, results, problem = run_experiment(
        name, overrides, runs=args.runs, base_seed=args.seed,
        iterations=args.iters, checkpoints=args.checkpoints,
        collect_losses=args.loss_curves is not None,
        timing=not args.no_timing, workers=args.workers,
    )
    meta = {
        "problem": problem.name,
        "reference": problem.reference,
        "reference_source": problem.reference_source,
        "runs": args.runs,
        "seeds": f"{args.seed}..{args.seed + args.runs - 1}",
        "config_hash": config_digest(name, overrides, args.runs, args.seed, args.iters),
    }
    emit_csv(stats, args.out, meta)
    if args.loss_curves:
        emit_loss_curves([r.losses for r in results], args.loss_curves)
    for row in stats:
        print(f"iter {row.iteration:>6}: estimate {row.mean_estimate:.5f} "
              f"rel-error {row.rel_l1_error:.5f} loss {row.mean_loss:.5f}")
    print(f"wrote {args.out}")
    return 0


def cmd_oracle(args) -> int:
    name = args.name
    if name == "bsb-analytic":
        d = args.d or 100
        xi = np.tile([1.0, 0.5], d // 2 + 1)[:d]
        val = oracles.bsb_analytic(args.t, xi, T=args.horizon or 1.0,
                                   sigma_max=args.sigma_max or 0.4)
        res = oracles.OracleResult(val, 0.0, "closed form", {"d": d})
    elif name == "gbm-analytic":
        d = args.d or 100
        xi = np.tile([1.0, 0.5], d // 2 + 1)[:d]
        res = oracles.OracleResult(
            oracles.gbm_analytic(args.t, xi, sigma_max=args.sigma_max or 1.0,
                                 T=args.horizon or 1.0, d=d),
            0.0, "closed form", {"d": d})
    elif name == "allen-cahn-branching":
        d = args.d or 20
        kappa = args.kappa if args.kappa is not None else (0.5 if d == 20 else 1.0)
        res = oracles.allen_cahn_branching(
            np.zeros(d), T=args.horizon or 0.3, kappa=kappa,
            M=args.samples, seed=args.seed, particle_cap=args.cap)
    elif name == "hjb-cole-hopf":
        d = args.d or 100
        res = oracles.hjb_cole_hopf(np.zeros(d), T=args.horizon or 1.0,
                                    M=args.samples, seed=args.seed)
    else:  # gbm1d-fd
        from .problems import g_sigmoid_sq
        res = oracles.gbm1d_finite_difference(
            args.x0, T=args.horizon or 1.0, sigma_max=args.sigma_max or 1.0,
            sigma_min=args.sigma_min, g=g_sigmoid_sq,
            halfwidth=args.halfwidth, num_points=args.points, num_steps=args.steps)
    print(res)
    return 0


def cmd_consistency(args) -> int:
    name = {"bsb": "bsb-100"}.get(args.problem, args.problem)
    problem = build_problem(name)
    if problem.sigma_bar is None or "bsb" not in problem.name:
        raise ValueError("the exact-coefficient check is defined for the bsb benchmark")
    losses = bsb_consistency_losses(problem, args.grid, J=args.paths, seed=args.seed)
    counts = sorted(losses)
    print("steps,loss,ratio_to_next")
    for i, n in enumerate(counts):
        ratio = losses[n] / losses[counts[i + 1]] if i + 1 < len(counts) else float("nan")
        print(f"{n},{losses[n]!r},{ratio:.3f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "oracle":
            return cmd_oracle(args)
        return cmd_consistency(args)
    except Exception as exc:  # surfaced as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

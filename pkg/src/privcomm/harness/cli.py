"""Command line entry point.

Subcommands ``mean``, ``freq`` and ``shuffle`` run a sweep for a protocol of
that family (from ``--config`` and/or flags); ``sweep`` runs a config file
as-is; ``accountant`` answers single budget queries.

Exit codes: 0 success, 2 configuration error, 3 every grid point infeasible.
"""
from __future__ import annotations

import argparse
import sys
from contextlib import nullcontext
from typing import Sequence

from .. import accountant as acc
from ..errors import ConfigError, InfeasibleError, OutOfRangeError
from ..freq_est import rhr_calibrate
from ..mean_est import select_dprime
from ..shuffle import plan_shuffled_sqkr
from .config import FREQ_PROTOCOLS, MEAN_PROTOCOLS, SHUFFLE_PROTOCOLS, ExperimentConfig
from .sweep import RowWriter, run_sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3

FAMILIES = {"mean": MEAN_PROTOCOLS, "freq": FREQ_PROTOCOLS, "shuffle": SHUFFLE_PROTOCOLS}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _run_flags(p: argparse.ArgumentParser, family: str | None) -> None:
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int, help="master seed for protocol randomness")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--accounting", choices=("closed-form", "rdp"))
    p.add_argument("--workers", type=int)
    if family is not None:
        p.add_argument("--protocol", choices=FAMILIES[family])
        p.add_argument("--n", type=int)
        p.add_argument("--d", type=int)
        p.add_argument("--b", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--eps", type=float, nargs="+", help="grid of target eps values")
        p.add_argument("--delta", type=float)
        p.add_argument("--data-seed", type=int)


def _accountant_parser(sub) -> None:
    p = sub.add_parser("accountant", help="privacy budget queries")
    ops = p.add_subparsers(dest="op", required=True, parser_class=_Parser)

    q = ops.add_parser("gaussian-sigma")
    q.add_argument("--sensitivity", type=float, default=1.0)
    q.add_argument("--eps", type=float, required=True)
    q.add_argument("--delta", type=float, required=True)

    q = ops.add_parser("amplify-poisson")
    q.add_argument("--eps", type=float, required=True)
    q.add_argument("--delta", type=float, required=True)
    q.add_argument("--gamma", type=float, required=True)

    q = ops.add_parser("compose-advanced")
    q.add_argument("--eps", type=float, required=True)
    q.add_argument("--delta", type=float, required=True)
    q.add_argument("--k", type=int, required=True)
    q.add_argument("--delta-tilde", type=float, required=True)

    q = ops.add_parser("calibrate", help="noise for subsampled Gaussian releases")
    q.add_argument("--eps", type=float, required=True)
    q.add_argument("--delta", type=float, required=True)
    q.add_argument("--gamma", type=float, required=True)
    q.add_argument("--coords", type=int, required=True)
    q.add_argument("--sensitivity", type=float, default=1.0)
    q.add_argument("--accounting", choices=("closed-form", "rdp"), default="closed-form")

    q = ops.add_parser("rdp-gaussian")
    q.add_argument("--sensitivity", type=float, default=1.0)
    q.add_argument("--sigma", type=float, required=True)
    q.add_argument("--alpha", type=float, required=True)

    q = ops.add_parser("rdp-subsampled-gaussian")
    q.add_argument("--gamma", type=float, required=True)
    q.add_argument("--noise-multiplier", type=float, required=True)
    q.add_argument("--alpha", type=int, required=True)

    q = ops.add_parser("rdp-eps", help="composed subsampled Gaussian converted to (eps, delta)")
    q.add_argument("--gamma", type=float, required=True)
    q.add_argument("--noise-multiplier", type=float, required=True)
    q.add_argument("--coords", type=int, default=1)
    q.add_argument("--delta", type=float, required=True)

    q = ops.add_parser("amplify-shuffle")
    q.add_argument("--eps0", type=float, required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--delta", type=float, required=True)

    q = ops.add_parser("rdp-shuffle")
    q.add_argument("--eps0", type=float, required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--alpha", type=float, required=True)

    q = ops.add_parser("plan-shuffle")
    q.add_argument("--eps", type=float, required=True)
    q.add_argument("--delta", type=float, required=True)
    q.add_argument("--b", type=int, required=True)
    q.add_argument("--d", type=int, required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--b0", type=int, default=1)
    q.add_argument("--accounting", choices=("closed-form", "rdp"), default="closed-form")

    q = ops.add_parser("select-dprime")
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--b", type=float, required=True)
    q.add_argument("--d", type=int, required=True)
    q.add_argument("--eps", type=float, required=True)
    q.add_argument("--delta", type=float, required=True)

    q = ops.add_parser("rhr-sigma")
    q.add_argument("--eps", type=float, required=True)
    q.add_argument("--delta", type=float, required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--d", type=int, required=True)
    q.add_argument("--b", type=int, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="privcomm", description="Communication-efficient private estimation experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for family in FAMILIES:
        _run_flags(sub.add_parser(family, help=f"{family} estimation sweep"), family)
    _run_flags(sub.add_parser("sweep", help="run a configuration file"), None)
    _accountant_parser(sub)
    return parser


def _num(x) -> str:
    if isinstance(x, int):
        return str(x)
    return format(float(x), ".12g")


def _print(**values) -> None:
    for k, v in values.items():
        print(f"{k}={_num(v) if v is not None else ''}")


def _accountant(args) -> int:
    op = args.op
    if op == "gaussian-sigma":
        _print(sigma2=acc.gaussian_sigma(args.sensitivity, acc.PrivacyBudget(args.eps, args.delta)))
    elif op == "amplify-poisson":
        out = acc.amplify_poisson(args.eps, args.delta, args.gamma)
        _print(eps=out.eps, delta=out.delta)
    elif op == "compose-advanced":
        out = acc.compose_advanced(args.eps, args.delta, args.k, args.delta_tilde)
        _print(eps=out.eps, delta=out.delta)
    elif op == "calibrate":
        cal = acc.calibrate(acc.PrivacyBudget(args.eps, args.delta), args.gamma, args.coords, args.sensitivity, args.accounting)
        closed, rdp = acc.audit_calibration(cal)
        _print(sigma2_sum=cal.sigma2_sum, eps1=cal.eps1, delta1=cal.delta1, eps2=cal.eps2, delta2=cal.delta2,
               eps_accounted_closed=closed, eps_accounted_rdp=rdp)
    elif op == "rdp-gaussian":
        _print(rdp=acc.rdp_gaussian(args.sensitivity, args.sigma, args.alpha))
    elif op == "rdp-subsampled-gaussian":
        _print(rdp=acc.rdp_subsampled_gaussian(args.gamma, args.noise_multiplier, args.alpha))
    elif op == "rdp-eps":
        _print(eps=acc.rdp_subsampled_gaussian_eps(args.gamma, args.noise_multiplier, args.coords, args.delta))
    elif op == "amplify-shuffle":
        _print(eps=acc.amplify_shuffle(args.eps0, args.n, args.delta))
    elif op == "rdp-shuffle":
        _print(rdp=acc.rdp_shuffle(args.eps0, args.n, args.alpha))
    elif op == "plan-shuffle":
        plan = plan_shuffled_sqkr(acc.PrivacyBudget(args.eps, args.delta), args.b, args.d, args.n,
                                  b0=args.b0, accounting=args.accounting)
        _print(T=plan.T, eps0=plan.eps0, b0=plan.b0, delta1=plan.delta1, delta2=plan.delta2,
               eps_accounted=plan.accounted.eps, bits_per_client=plan.bits_per_client)
    elif op == "select-dprime":
        _print(dprime=select_dprime(args.n, args.b, args.d, acc.PrivacyBudget(args.eps, args.delta)))
    elif op == "rhr-sigma":
        _print(sigma2=rhr_calibrate(acc.PrivacyBudget(args.eps, args.delta), args.n, args.d, args.b))
    return EXIT_OK


def _config(args, family: str | None) -> ExperimentConfig:
    flags = {}
    if family is not None:
        flags = {
            "protocol": args.protocol, "n": args.n, "d": args.d, "b": args.b, "gamma": args.gamma,
            "eps_grid": tuple(args.eps) if args.eps else None, "delta": args.delta, "data_seed": args.data_seed,
        }
        if flags["b"] is not None and flags["b"] == int(flags["b"]):
            flags["b"] = int(flags["b"])
    flags.update(trials=args.trials, protocol_seed=args.seed, accounting=args.accounting, workers=args.workers)
    if args.config:
        cfg = ExperimentConfig.load(args.config).with_overrides(**flags)
    elif family is None:
        raise ConfigError("sweep needs --config")
    else:
        base = {"protocol": FAMILIES[family][0], "delta": 1e-5}
        base.update({k: v for k, v in flags.items() if v is not None})
        cfg = ExperimentConfig.from_dict(base)
    if family is not None and cfg.protocol not in FAMILIES[family]:
        raise ConfigError(f"protocol {cfg.protocol!r} does not belong to the {family} command")
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "accountant":
            return _accountant(args)
        family = args.command if args.command in FAMILIES else None
        cfg = _config(args, family)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OutOfRangeError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    feasible = 0
    try:
        target = open(args.out, "w", newline="") if args.out else nullcontext(sys.stdout)
    except OSError as exc:
        print(f"config error: cannot open output {args.out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    with target as fh:
        writer = RowWriter(fh, args.format)
        for result in run_sweep(cfg):
            writer.write(result)
            feasible += not result.infeasible
        writer.close()
    return EXIT_OK if feasible else EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())

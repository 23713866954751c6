"""``gridcoord`` command line: simulate, clear, curve-dump and verify.

Exit codes: 0 success, 1 validation failure (bad scenario, failed check),
2 infeasible dispatch, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from gridcoord.coordination import InfeasibleError, centralized_clear
from gridcoord.scenario_io.config import ConfigError, bundled_scenario, load_scenario
from gridcoord.scenario_io.runner import build_simulation, simulate
from gridcoord.scheduler import FeederSimulation

log = logging.getLogger("gridcoord")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_INFEASIBLE = 2
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _scenario(ref: str):
    """A scenario file path, or the name of a bundled scenario such as ``case2_desk``."""
    p = Path(ref)
    if not p.exists() and p.suffix == "" and "/" not in ref:
        try:
            p = bundled_scenario(ref)
        except ConfigError:
            pass
    return load_scenario(p)


def _advance_to(sim: FeederSimulation, period: int) -> None:
    if not 0 <= period < sim.n_periods:
        raise ConfigError(f"--period: {period} outside 0..{sim.n_periods - 1}")
    for _ in range(period):
        sim.run_period()


def _cmd_simulate(args) -> int:
    cfg = _scenario(args.scenario)
    out = simulate(cfg, args.out)
    if cfg["mode"] == "base":
        print(f"{cfg.name}: base load over {len(out)} periods, peak {float(np.max(out)):.3f} kW -> {args.out}")
        return EXIT_OK
    desired = np.array([r.feeder_desired_kw for r in out])
    actual = np.array([r.feeder_actual_kw for r in out])
    err = float(np.mean(np.abs(actual - desired)) / np.mean(desired)) if np.mean(desired) else float("nan")
    fallbacks = sum(r.fallback for r in out)
    print(f"{cfg.name}: {len(out)} periods, tracking error {err:.2%}, {fallbacks} fallback(s) -> {args.out}")
    return EXIT_OK


def _cmd_clear(args) -> int:
    sim = build_simulation(_scenario(args.scenario))
    _advance_to(sim, args.period)
    plan, curves = sim.prepare_period()
    result, fallback = sim.clear(plan, curves)
    doc = asdict(result)
    doc.update(period=args.period, fallback=fallback, d_total_kw=plan.d_total_kw,
               agents=[g.name for g in sim.dgs] + [a.name for a in sim.aggregators])
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def _cmd_curve_dump(args) -> int:
    sim = build_simulation(_scenario(args.scenario))
    _advance_to(sim, args.period)
    t = args.period
    uncapped, capped, _ = sim.collect_curves(t)
    aggs = []
    for agg, (curves, _), u, c in zip(sim.aggregators, sim.house_curves(t), uncapped, capped):
        aggs.append({
            "name": agg.name,
            "cap_kw": agg.cap_kw,
            "houses": [dc.to_dict() for dc in curves],
            "aggregate": u.to_dict(),
            "capped": c.to_dict(),
        })
    dgs = [{"name": g.name, "a": g.a, "b": g.b, "c": g.c, "p_min": g.p_min_kw, "p_max": g.p_max_kw}
           for g in sim.dgs]
    text = json.dumps({"period": t, "generators": dgs, "aggregators": aggs}, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote curves of period {t} to {args.out}")
    else:
        print(text)
    return EXIT_OK


def _cmd_verify(args) -> int:
    sim = build_simulation(_scenario(args.scenario))
    n = min(args.periods, sim.n_periods)
    worst_price = worst_power = 0.0
    ok = True
    print(f"{'period':>6} {'iters':>8} {'lambda_dist':>12} {'lambda_ref':>12} {'|dlambda|':>10} {'max dp/span':>12}")
    for t in range(n):
        plan, curves = sim.prepare_period()
        dist = sim.distributed(plan, curves)
        ref = centralized_clear(curves, plan.d_total_kw)
        d_price = abs(dist.lambda_star - ref.lambda_star)
        spans = np.array([max(c.p_max_kw - c.p_min_kw, 1e-9) for c in curves])
        d_power = float(np.max(np.abs(np.subtract(dist.powers, ref.powers)) / spans))
        worst_price, worst_power = max(worst_price, d_price), max(worst_power, d_power)
        good = dist.converged and d_price <= args.tol_price
        ok &= good
        print(f"{t:>6} {dist.iterations:>8} {dist.lambda_star:>12.6f} {ref.lambda_star:>12.6f} "
              f"{d_price:>10.2e} {d_power:>12.2e}{'' if good else '  FAIL'}")
        sim.run_period()
    print(f"max |dlambda| {worst_price:.3e} $/kWh (tol {args.tol_price:g}); "
          f"max power error {worst_power:.3e} of agent range: {'OK' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridcoord", description="Distributed DER/DR coordination on a lossless feeder.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run a scenario and write the result CSVs")
    p.add_argument("scenario", help="scenario JSON file or bundled scenario name")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("clear", help="clear one period and print the result")
    p.add_argument("scenario")
    p.add_argument("--period", type=int, required=True)
    p.set_defaults(func=_cmd_clear)

    p = sub.add_parser("curve-dump", help="write every demand curve of one period as JSON")
    p.add_argument("scenario")
    p.add_argument("--period", type=int, required=True)
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=_cmd_curve_dump)

    p = sub.add_parser("verify", help="compare distributed clearing with the centralized solution")
    p.add_argument("scenario")
    p.add_argument("--periods", type=int, default=1, help="number of periods to check (default 1)")
    p.add_argument("--tol-price", type=float, default=1e-3, help="$/kWh (default 1e-3)")
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


run_cli = main


if __name__ == "__main__":
    sys.exit(main())

"""CSV result files, one per stream, and their read-back accounting check.

Floats are written with ``repr`` so that a file read back reproduces the
simulated values bit for bit.
"""

from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from gridcoord.market_curves import SupplyCurve
from gridcoord.scheduler import PeriodRecord, feeder_balance

FEEDER_COLUMNS = [
    "period", "t_start_h", "ref_kw", "feeder_desired_kw", "feeder_actual_kw", "aggregator_total_kw",
    "uncontrollable_kw", "dg_total_kw", "lambda_star",
]
AGGREGATOR_COLUMNS = [
    "period", "aggregator", "price", "scheduled_kw", "actual_kw", "e_min_kw", "e_max_kw",
    "uncontrollable_kw", "forecast_kw", "cap_kw", "local_price", "cap_binding",
    "uncapped_price",
]
DG_COLUMNS = ["period", "dg", "output_kw", "marginal_cost", "at_limit"]
HOUSE_COLUMNS = ["period", "aggregator", "house", "t_air_f", "setpoint_f", "mode"]
CLEARING_COLUMNS = [
    "period", "method", "iterations", "converged", "fallback", "price_spread", "balance_mismatch_kw",
    "lambda_star", "d_total_kw", "requested_d_kw", "clamped",
]
BASE_COLUMNS = ["period", "t_start_h", "feeder_kw", "t_out_f"]

FILES = {
    "feeder.csv": FEEDER_COLUMNS,
    "aggregators.csv": AGGREGATOR_COLUMNS,
    "dgs.csv": DG_COLUMNS,
    "houses.csv": HOUSE_COLUMNS,
    "clearing.csv": CLEARING_COLUMNS,
}


class AccountingError(ValueError):
    """A results row that violates the feeder energy-accounting identity."""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write(path: Path, columns: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_results(out_dir: str | Path, records: Sequence[PeriodRecord], dgs: Sequence[SupplyCurve]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feeder, aggs, dg_rows, houses, clearing = [], [], [], [], []
    for r in records:
        c = r.clearing
        feeder.append([
            r.index, r.t_start_h, r.plan.ref_kw, r.feeder_desired_kw, r.feeder_actual_kw,
            sum(a.actual_kw for a in r.aggregators), r.uncontrollable_kw, sum(r.dg_output_kw), c.lambda_star,
        ])
        for a in r.aggregators:
            aggs.append([r.index, a.name, a.price, a.scheduled_kw, a.actual_kw, a.e_min_kw, a.e_max_kw,
                         a.uncontrollable_kw, a.forecast_kw, a.cap_kw, a.local_price, a.cap_binding,
                         a.uncapped_price])
        for g, p in zip(dgs, r.dg_output_kw):
            at_limit = p <= g.p_min_kw or p >= g.p_max_kw
            dg_rows.append([r.index, g.name, p, float(g.marginal_cost(p)), at_limit])
        for h in r.houses:
            houses.append([r.index, h.aggregator, h.index, h.t_air_f, h.setpoint_f, h.mode])
        clearing.append([r.index, c.method, c.iterations, c.converged, r.fallback, c.price_spread,
                         c.balance_mismatch_kw, c.lambda_star, r.plan.d_total_kw, r.plan.requested_d_kw,
                         r.plan.clamped])
    paths = []
    for name, rows in zip(FILES, (feeder, aggs, dg_rows, houses, clearing)):
        p = out / name
        _write(p, FILES[name], rows)
        paths.append(p)
    return paths


def write_base(out_dir: str | Path, feeder_kw: Sequence[float], t_out_f: Sequence[float], period_h: float) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / "base_feeder.csv"
    _write(p, BASE_COLUMNS, [[i, i * period_h, float(kw), float(t)] for i, (kw, t) in enumerate(zip(feeder_kw, t_out_f))])
    return p


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def check_accounting(out_dir: str | Path) -> int:
    """Re-check ``feeder = sum(aggregators) + uncontrollable - sum(dg)`` on every feeder row.

    Returns the number of rows checked; raises :class:`AccountingError` on the
    first violating row.
    """
    out = Path(out_dir)
    feeder = read_csv(out / "feeder.csv")
    aggs: dict[int, list[float]] = {}
    for row in read_csv(out / "aggregators.csv"):
        aggs.setdefault(int(row["period"]), []).append(float(row["actual_kw"]))
    dgs: dict[int, list[float]] = {}
    for row in read_csv(out / "dgs.csv"):
        dgs.setdefault(int(row["period"]), []).append(float(row["output_kw"]))
    for row in feeder:
        t = int(row["period"])
        expected = feeder_balance(aggs.get(t, []), float(row["uncontrollable_kw"]), dgs.get(t, []))
        if expected != float(row["feeder_actual_kw"]):
            raise AccountingError(
                f"period {t}: feeder_actual_kw={row['feeder_actual_kw']} but components give {expected!r}"
            )
    return len(feeder)


def results_schema() -> dict:
    return json.loads(resources.files("gridcoord.data").joinpath("results.schema.json").read_text())

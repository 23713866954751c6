"""Assemble a :class:`FeederSimulation` from a scenario and run it."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from gridcoord.scenario_io.config import ConfigError, ScenarioConfig
from gridcoord.scenario_io.population import build_aggregators, weather_inputs
from gridcoord.scenario_io.results import check_accounting, write_base, write_results
from gridcoord.scenario_io.series import TimeSeries
from gridcoord.scheduler import FeederSimulation, PeriodRecord, ReferencePolicy, Settings, base_case

log = logging.getLogger(__name__)


def settings_from(cfg: ScenarioConfig) -> Settings:
    tol, curves, prices = cfg["tolerances"], cfg["curves"], cfg["prices"]
    return Settings(
        period_h=cfg.period_h,
        substep_h=cfg.substep_h,
        n_samples=curves["n_samples"],
        curve_mode=curves["mode"],
        regularize_width=curves["regularize_width"],
        tol_price=tol["price"],
        tol_balance_kw=tol["balance_kw"],
        max_iters=tol["max_iters"],
        gains=cfg.gains(),
        bootstrap_price=prices["bootstrap_price"],
        bootstrap_sigma=prices["bootstrap_sigma"],
        price_window=prices["window"],
        min_price_samples=prices["min_samples"],
        sigma_floor=prices["sigma_floor"],
        sampled_houses=cfg["sampled_houses"],
    )


def policy_from(cfg: ScenarioConfig) -> ReferencePolicy:
    ref = cfg["reference"]
    series = None
    if ref["kind"] == "explicit_series":
        if "series_kw" in ref:
            series = tuple(float(v) for v in ref["series_kw"])
        else:
            ts = TimeSeries.from_csv(cfg.resolve(ref["path"]), "kW")
            if not ts.covers(0.0, cfg.n_periods * cfg.period_h):
                raise ConfigError("reference.path: series does not cover the horizon")
            series = tuple(ts.period_averages(cfg.period_h, cfg.n_periods))
    return ReferencePolicy(ref["kind"], ref.get("fraction", 0.7), series)


def base_load(cfg: ScenarioConfig) -> np.ndarray:
    """Case-1 feeder load of the scenario's population (no generators, no demand response)."""
    return base_case(build_aggregators(cfg), weather_inputs(cfg), settings_from(cfg))


def build_simulation(cfg: ScenarioConfig) -> FeederSimulation:
    if cfg["mode"] != "coordinated":
        raise ConfigError("mode: only coordinated scenarios run the market loop")
    return FeederSimulation(
        build_aggregators(cfg),
        cfg.dgs(),
        cfg.graph(),
        weather_inputs(cfg),
        settings_from(cfg),
        policy_from(cfg),
    )


def simulate(cfg: ScenarioConfig, out_dir: str | Path | None = None) -> list[PeriodRecord] | np.ndarray:
    """Run a scenario; write result files when ``out_dir`` is given."""
    if cfg["mode"] == "base":
        load = base_load(cfg)
        if out_dir is not None:
            write_base(out_dir, load, weather_inputs(cfg).t_out_f, cfg.period_h)
        return load
    sim = build_simulation(cfg)
    records = sim.run()
    if out_dir is not None:
        write_results(out_dir, records, sim.dgs)
        check_accounting(out_dir)
    return records

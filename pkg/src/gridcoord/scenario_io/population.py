"""Seeded synthesis of the house population and the exogenous series of a scenario."""

from __future__ import annotations

import numpy as np

from gridcoord.market_curves import ComfortPrefs
from gridcoord.scenario_io.config import DEFAULT_COMFORT_RANGES, DEFAULT_HOUSE_RANGES, ConfigError, ScenarioConfig
from gridcoord.scenario_io.series import TimeSeries, residential_load, solar_fraction, summer_day_temperature
from gridcoord.scheduler import Aggregator, House, WeatherInputs
from gridcoord.thermal import OFF, ON, EtpParams, ModelValidationError, ThermalState

# fine grid of the synthetic exogenous series (h)
SERIES_STEP_H = 1.0 / 60.0


def _draw(rng: np.random.Generator, lo_hi) -> float:
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _house(rng: np.random.Generator, house_ranges: dict, comfort_ranges: dict) -> House:
    params = EtpParams(**{k: _draw(rng, house_ranges[k]) for k in DEFAULT_HOUSE_RANGES})
    t_des = _draw(rng, comfort_ranges["t_desired_f"])
    pref = ComfortPrefs(
        t_desired_f=t_des,
        t_min_f=t_des - _draw(rng, comfort_ranges["band_low_f"]),
        t_max_f=t_des + _draw(rng, comfort_ranges["band_high_f"]),
        k_tradeoff=_draw(rng, comfort_ranges["k"]),
    )
    half = params.deadband_f / 2.0
    t_air = t_des + float(rng.uniform(-half, half))
    state = ThermalState(t_air, t_air, ON if rng.random() < 0.5 else OFF)
    return House(params, pref, state)


def synthesize_population(cfg: ScenarioConfig) -> list[tuple[list[House], list[House]]]:
    """Participating and passive houses per aggregator, drawn from the configured ranges.

    Each aggregator draws from its own generator seeded by ``(seed, index)``, so
    changing one aggregator's count leaves the others' houses unchanged.
    """
    pop = cfg["population"]
    house_ranges = {**DEFAULT_HOUSE_RANGES, **pop.get("house", {})}
    comfort_ranges = {**DEFAULT_COMFORT_RANGES, **pop.get("comfort", {})}
    out = []
    for j, spec in enumerate(pop["aggregators"]):
        rng = np.random.default_rng([cfg.seed, j])
        participants = [_house(rng, house_ranges, comfort_ranges) for _ in range(spec["participants"])]
        passive = [_house(rng, house_ranges, comfort_ranges) for _ in range(spec.get("passive", 0))]
        for h in participants + passive:
            try:
                h.params.model(cfg["weather"].get("t_high_f", 95.0), 1.0, h.pref).validate()
            except ModelValidationError as exc:
                raise ConfigError(f"population.house: ranges produce an invalid thermal model ({exc})") from exc
        out.append((participants, passive))
    return out


def weather_series(cfg: ScenarioConfig) -> tuple[TimeSeries, TimeSeries]:
    w = cfg["weather"]
    hours = cfg["horizon_h"]
    if w["kind"] == "synthetic_summer":
        temp = summer_day_temperature(SERIES_STEP_H, hours, w["t_low_f"], w["t_high_f"], w["peak_hour"])
        solar = solar_fraction(SERIES_STEP_H, hours)
    else:
        temp = TimeSeries.from_csv(cfg.resolve(w["path"]), "degF")
        solar = (TimeSeries.from_csv(cfg.resolve(w["solar_path"]), "fraction") if w.get("solar_path")
                 else TimeSeries(temp.start_h, temp.step_h, np.zeros(len(temp.values)), "fraction"))
    for label, ts in (("weather.path", temp), ("weather.solar_path", solar)):
        if not ts.covers(0.0, cfg.n_periods * cfg.period_h):
            raise ConfigError(f"{label}: series does not cover the {hours} h horizon")
    return temp, solar


def weather_inputs(cfg: ScenarioConfig) -> WeatherInputs:
    """Outdoor conditions held constant over each period at their period-start values."""
    temp, solar = weather_series(cfg)
    n = cfg.n_periods
    return WeatherInputs(temp.period_starts(cfg.period_h, n), solar.period_starts(cfg.period_h, n))


def uncontrollable_series(cfg: ScenarioConfig) -> list[TimeSeries]:
    """Non-AC load per aggregator (kW)."""
    u = cfg["uncontrollable"]
    n_periods = cfg.n_periods
    out = []
    if u["kind"] == "csv":
        for j, ref in enumerate(u["paths"]):
            ts = TimeSeries.from_csv(cfg.resolve(ref), "kW")
            if not ts.covers(0.0, n_periods * cfg.period_h):
                raise ConfigError(f"uncontrollable.paths[{j}]: series does not cover the horizon")
            out.append(ts)
        return out
    for j, spec in enumerate(cfg["population"]["aggregators"]):
        # separate stream from the population draw so house parameters do not shift
        rng = np.random.default_rng([cfg.seed, j, 1])
        n_houses = spec["participants"] + spec.get("passive", 0)
        out.append(residential_load(SERIES_STEP_H, cfg["horizon_h"], u["per_house_kw"], n_houses, u["noise_frac"], rng))
    return out


def build_aggregators(cfg: ScenarioConfig) -> list[Aggregator]:
    pops = synthesize_population(cfg)
    loads = uncontrollable_series(cfg)
    boot = cfg["uncontrollable"].get("bootstrap_kw")
    caps = cfg["line_caps"]
    aggs = []
    for j, (name, (houses, passive), series) in enumerate(zip(cfg.aggregator_names, pops, loads)):
        aggs.append(
            Aggregator(
                name=name,
                houses=houses,
                passive=passive,
                other_load_kw=series.period_averages(cfg.period_h, cfg.n_periods),
                cap_kw=caps.get(name),
                bootstrap_uncontrollable_kw=None if boot is None else float(boot[j]),
            )
        )
    return aggs

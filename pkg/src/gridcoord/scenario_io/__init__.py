"""Scenario files, population synthesis, result persistence and the command line."""

from gridcoord.scenario_io.config import (
    ConfigError,
    ScenarioConfig,
    bundled_scenario,
    load_scenario,
    save_scenario,
    validate,
)
from gridcoord.scenario_io.population import build_aggregators, synthesize_population, weather_inputs
from gridcoord.scenario_io.results import AccountingError, check_accounting, write_results
from gridcoord.scenario_io.runner import base_load, build_simulation, simulate
from gridcoord.scenario_io.series import TimeSeries

__all__ = [
    "AccountingError",
    "ConfigError",
    "ScenarioConfig",
    "TimeSeries",
    "base_load",
    "build_aggregators",
    "build_simulation",
    "bundled_scenario",
    "check_accounting",
    "load_scenario",
    "save_scenario",
    "simulate",
    "synthesize_population",
    "validate",
    "weather_inputs",
    "write_results",
]

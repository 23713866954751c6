"""Scenario configuration: JSON loading, defaults, validation and saving."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from gridcoord.coordination import CommGraph, GainSchedule, GraphError
from gridcoord.market_curves import SupplyCurve


class ConfigError(ValueError):
    """Scenario file that cannot be parsed or violates a constraint."""


DEFAULT_HOUSE_RANGES = {
    "ua": [250.0, 450.0],
    "ca": [800.0, 1400.0],
    "cm": [3000.0, 8000.0],
    "hm": [3000.0, 6000.0],
    "cooling_btuh": [24000.0, 36000.0],
    "cop": [3.0, 3.8],
    "internal_gain_btuh": [1500.0, 3000.0],
    "solar_gain_btuh": [2000.0, 5000.0],
    "mass_gain_frac": [0.5, 0.5],
    "deadband_f": [1.5, 2.5],
}

DEFAULT_COMFORT_RANGES = {
    "t_desired_f": [70.0, 75.0],
    "band_low_f": [2.0, 4.0],
    "band_high_f": [2.0, 4.0],
    "k": [1.0, 3.0],
}

DEFAULTS: dict[str, Any] = {
    "mode": "coordinated",
    "horizon_h": 24.0,
    "period_min": 5.0,
    "substep_s": 30.0,
    "weather": {"kind": "synthetic_summer", "t_low_f": 72.0, "t_high_f": 96.0, "peak_hour": 15.0},
    "uncontrollable": {"kind": "synthetic_residential", "per_house_kw": 0.5, "noise_frac": 0.05, "bootstrap_kw": None},
    "dgs": {"table": "table1_dgs.json", "scale": 1.0},
    "graph": {"topology": "ring"},
    "gains": None,
    "tolerances": {"price": 1e-4, "balance_kw": None, "max_iters": 400000},
    "reference": {"kind": "fraction_of_base", "fraction": 0.7},
    "line_caps": {},
    "curves": {"mode": "step", "n_samples": 10, "regularize_width": 1e-6},
    "prices": {"bootstrap_price": 0.1, "bootstrap_sigma": 0.02, "window": 288, "min_samples": 12, "sigma_floor": 0.0},
    "sampled_houses": 3,
}


def _schema() -> dict:
    return json.loads(resources.files("gridcoord.data").joinpath("scenario.schema.json").read_text())


def _merge(defaults: Any, given: Any) -> Any:
    if isinstance(defaults, dict) and isinstance(given, dict):
        out = copy.deepcopy(defaults)
        for key, value in given.items():
            out[key] = _merge(defaults.get(key), value) if key in defaults else copy.deepcopy(value)
        return out
    return copy.deepcopy(given)


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario. ``data`` is the full document with defaults filled in."""

    data: dict
    base_dir: Path = field(default=Path("."), compare=False)

    def __getitem__(self, key: str) -> Any:
        return self.data[key]

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def period_h(self) -> float:
        return self.data["period_min"] / 60.0

    @property
    def substep_h(self) -> float:
        return self.data["substep_s"] / 3600.0

    @property
    def n_periods(self) -> int:
        return int(round(self.data["horizon_h"] / self.period_h))

    @property
    def aggregator_names(self) -> list[str]:
        return [a["name"] for a in self.data["population"]["aggregators"]]

    def resolve(self, ref: str) -> Path:
        """Resolve a file reference against the scenario directory, then the bundled data."""
        p = Path(ref)
        if not p.is_absolute() and (self.base_dir / p).exists():
            return self.base_dir / p
        if p.exists():
            return p
        bundled = resources.files("gridcoord.data").joinpath(ref)
        if bundled.is_file():
            return Path(str(bundled))
        raise ConfigError(f"referenced file {ref!r} not found (relative to {self.base_dir})")

    def dgs(self) -> list[SupplyCurve]:
        spec = self.data["dgs"]
        table = spec["table"]
        if isinstance(table, str):
            table = json.loads(self.resolve(table).read_text())["generators"]
        scale = float(spec["scale"])
        out = []
        for i, g in enumerate(table):
            try:
                curve = SupplyCurve(float(g["a"]), float(g["b"]), float(g["c"]), float(g["range"][0]),
                                    float(g["range"][1]), g.get("name", f"DG{i + 1}"))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"dgs.table[{i}]: {exc}") from exc
            out.append(curve.scaled(scale) if scale != 1.0 else curve)
        return out

    def graph(self) -> CommGraph:
        n = len(self.dgs()) + len(self.aggregator_names)
        try:
            return CommGraph.from_spec(self.data["graph"], n)
        except GraphError as exc:
            raise ConfigError(f"graph: {exc}") from exc

    def gains(self) -> GainSchedule | None:
        g = self.data["gains"]
        if g is None:
            return None
        try:
            return GainSchedule(**g)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"gains: {exc}") from exc

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def validate(doc: dict, base_dir: Path = Path(".")) -> ScenarioConfig:
    """Fill defaults and check the document; errors name the offending field."""
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e.absolute_path)}: {e.message}")
    cfg = ScenarioConfig(_merge(DEFAULTS, doc), Path(base_dir))
    _check_semantics(cfg)
    return cfg


def _check_range(where: str, lo_hi) -> None:
    lo, hi = lo_hi
    if lo > hi:
        raise ConfigError(f"{where}: lower bound {lo} exceeds upper bound {hi}")


def _check_semantics(cfg: ScenarioConfig) -> None:
    d = cfg.data
    if d["substep_s"] / 3600.0 > cfg.period_h:
        raise ConfigError("substep_s: sub-step longer than the period")
    if cfg.n_periods < 1:
        raise ConfigError("horizon_h: shorter than one period")
    names = cfg.aggregator_names
    if len(set(names)) != len(names):
        raise ConfigError("population.aggregators: aggregator names must be unique")
    pop = d["population"]
    for key, rng in {**DEFAULT_HOUSE_RANGES, **pop.get("house", {})}.items():
        _check_range(f"population.house.{key}", rng)
    mf = pop.get("house", {}).get("mass_gain_frac", DEFAULT_HOUSE_RANGES["mass_gain_frac"])
    if mf[0] < 0.0 or mf[1] > 1.0:
        raise ConfigError("population.house.mass_gain_frac: must lie within [0, 1]")
    for key, rng in {**DEFAULT_COMFORT_RANGES, **pop.get("comfort", {})}.items():
        _check_range(f"population.comfort.{key}", rng)
        if key != "t_desired_f" and rng[0] < 0.0:
            raise ConfigError(f"population.comfort.{key}: must be non-negative")
    for name in d["line_caps"]:
        if name not in names:
            raise ConfigError(f"line_caps.{name}: no aggregator with that name")
    unc = d["uncontrollable"]
    if unc["kind"] == "csv" and len(unc.get("paths", [])) != len(names):
        raise ConfigError("uncontrollable.paths: one series per aggregator is required")
    if unc.get("bootstrap_kw") is not None and len(unc["bootstrap_kw"]) != len(names):
        raise ConfigError("uncontrollable.bootstrap_kw: one value per aggregator is required")
    if d["weather"]["kind"] == "csv" and "path" not in d["weather"]:
        raise ConfigError("weather.path: required for csv weather")
    ref = d["reference"]
    if ref["kind"] == "explicit_series":
        if "series_kw" not in ref and "path" not in ref:
            raise ConfigError("reference: explicit_series needs series_kw or path")
        if "series_kw" in ref and len(ref["series_kw"]) < cfg.n_periods:
            raise ConfigError(f"reference.series_kw: {len(ref['series_kw'])} values do not cover {cfg.n_periods} periods")
    if d["mode"] == "coordinated":
        dgs = cfg.dgs()
        for i, g in enumerate(dgs):
            if not g.p_max_kw > g.p_min_kw:
                raise ConfigError(f"dgs.table[{i}]: range must have p_min < p_max")
        cfg.graph()
        g = cfg.gains()
        if g is not None:
            try:
                g.check(cfg.graph())
            except ValueError as exc:
                raise ConfigError(f"gains.beta0: {exc}") from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return validate(doc, path.parent)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_scenario(cfg: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def bundled_scenario(name: str) -> Path:
    """Path of a scenario shipped with the package, e.g. ``"case2_desk"``."""
    ref = resources.files("gridcoord.data").joinpath("scenarios", f"{name}.json")
    if not ref.is_file():
        raise ConfigError(f"no bundled scenario named {name!r}")
    return Path(str(ref))

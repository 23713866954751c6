import copy
import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import strategies as st

from gridcoord.coordination import CommGraph, GraphError, signed_limits
from gridcoord.market_curves import (
    AggregateCurve,
    ComfortPrefs,
    DemandCurve,
    PriceStats,
    ResponseCurve,
    SupplyCurve,
    aggregate,
)
from gridcoord.thermal import OFF, ON, EtpParams, ThermalState


def table1() -> list[SupplyCurve]:
    doc = json.loads(resources.files("gridcoord.data").joinpath("table1_dgs.json").read_text())
    return [SupplyCurve(g["a"], g["b"], g["c"], g["range"][0], g["range"][1], g["name"]) for g in doc["generators"]]


@pytest.fixture
def dgs() -> list[SupplyCurve]:
    return table1()


@pytest.fixture
def params() -> EtpParams:
    return EtpParams(ua=350.0, ca=1000.0, cm=5000.0, hm=4000.0, cooling_btuh=30000.0, cop=3.4,
                     internal_gain_btuh=2000.0, solar_gain_btuh=3000.0, mass_gain_frac=0.5, deadband_f=2.0)


@pytest.fixture
def prefs() -> ComfortPrefs:
    return ComfortPrefs(t_desired_f=73.0, t_min_f=70.0, t_max_f=76.0, k_tradeoff=2.0)


@pytest.fixture
def response(prefs) -> ResponseCurve:
    return ResponseCurve(prefs, PriceStats(0.08, 0.02))


@pytest.fixture
def model(params, prefs):
    return params.model(95.0, 0.5, prefs)


def random_params(rng: np.random.Generator) -> EtpParams:
    return EtpParams(
        ua=rng.uniform(250, 450), ca=rng.uniform(800, 1400), cm=rng.uniform(3000, 8000),
        hm=rng.uniform(3000, 6000), cooling_btuh=rng.uniform(24000, 36000), cop=rng.uniform(3.0, 3.8),
        internal_gain_btuh=rng.uniform(1500, 3000), solar_gain_btuh=rng.uniform(2000, 5000),
        mass_gain_frac=0.5, deadband_f=rng.uniform(1.5, 2.5),
    )


def random_prefs(rng: np.random.Generator, k: float | None = None) -> ComfortPrefs:
    t = rng.uniform(70, 75)
    return ComfortPrefs(t, t - rng.uniform(2, 4), t + rng.uniform(2, 4), rng.uniform(1, 3) if k is None else k)


def random_state(rng: np.random.Generator, pref: ComfortPrefs, deadband: float) -> ThermalState:
    t_air = pref.t_desired_f + rng.uniform(-deadband, deadband)
    return ThermalState(t_air, t_air + rng.uniform(-1.0, 1.0), ON if rng.random() < 0.5 else OFF)


@st.composite
def demand_curves(draw, max_samples: int = 6) -> DemandCurve:
    """Arbitrary valid demand curves: sorted prices and non-increasing powers."""
    n = draw(st.integers(0, max_samples))
    prices = sorted(draw(st.lists(st.floats(0.0, 0.5, allow_nan=False), min_size=n + 2, max_size=n + 2)))
    powers = sorted(draw(st.lists(st.floats(0.0, 5.0, allow_nan=False), min_size=n + 2, max_size=n + 2)),
                    reverse=True)
    return DemandCurve.from_breakpoints(prices, powers)


@st.composite
def supply_curves(draw) -> SupplyCurve:
    lo = draw(st.floats(0.0, 100.0))
    return SupplyCurve(draw(st.floats(1e-4, 1e-3)), draw(st.floats(0.01, 0.03)), draw(st.floats(0.0, 1.0)),
                       lo, lo + draw(st.floats(1.0, 400.0)))


def random_graph(rng: np.random.Generator, n: int) -> CommGraph:
    """Erdos-Renyi graph above the connectivity threshold, redrawn until connected."""
    p = min(1.0, 2.5 * np.log(n) / n)
    while True:
        edges = {(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p}
        try:
            return CommGraph(n, frozenset(edges))
        except GraphError:
            continue


def random_load(rng: np.random.Generator) -> AggregateCurve:
    parts = []
    for _ in range(int(rng.integers(3, 8))):
        lo = rng.uniform(0.03, 0.12)
        hi = lo + rng.uniform(0.005, 0.05)
        e_max = rng.uniform(20, 120)
        e_min = rng.uniform(0, 0.3 * e_max)
        ns = int(rng.integers(0, 6))
        prices = np.sort(rng.uniform(lo, hi, ns))
        powers = np.sort(rng.uniform(e_min, e_max, ns))[::-1]
        parts.append(DemandCurve(e_max, e_min, lo, hi, tuple(zip(prices, powers))))
    return aggregate(parts)


def random_generator(rng: np.random.Generator) -> SupplyCurve:
    """Quadratic generator with coefficients in the range of the bundled generator table."""
    lo = rng.uniform(20, 50)
    return SupplyCurve(rng.uniform(1.5e-4, 5.2e-4), rng.uniform(0.015, 0.03), 0.3, lo, lo + rng.uniform(80, 450))


def random_market(rng: np.random.Generator, n: int):
    """Graph, curves, interior total D and a random split of D."""
    graph = random_graph(rng, n)
    curves = [random_generator(rng) if rng.random() < 0.5 else random_load(rng) for _ in range(n)]
    lo = sum(signed_limits(c)[0] for c in curves)
    hi = sum(signed_limits(c)[1] for c in curves)
    demand = rng.uniform(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo))
    return graph, curves, demand, demand * rng.dirichlet(np.ones(n))


SMALL = {
    "name": "small",
    "seed": 7,
    "horizon_h": 1.0,
    "population": {"aggregators": [{"name": "A1", "participants": 3, "passive": 1},
                                   {"name": "A2", "participants": 4}]},
    "dgs": {"table": "table1_dgs.json", "scale": 0.02},
    "curves": {"mode": "full", "n_samples": 10},
}


def small(**changes) -> dict:
    """One-hour, seven-house scenario document, optionally with top-level fields replaced."""
    doc = copy.deepcopy(SMALL)
    doc.update(changes)
    return doc

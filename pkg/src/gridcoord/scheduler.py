"""Two-stage operation of a feeder: market clearing every period, device control in between.

At each period boundary every aggregator collects demand curves from its
participating air conditioners, the coordination layer clears those curves
against the generators, and each aggregator broadcasts its clearing price.
Houses translate the price into a thermostat setpoint which they hold while
the thermal simulation advances at the control sub-step.

Sign convention of the balance: ``contr + uncontr - dg = ref``, so in the
generalized variables (generation positive, consumption negative) the
dispatch target is ``D = uncontr - ref``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from gridcoord.coordination import (
    DEFAULT_MAX_ITERS,
    DEFAULT_TOL_PRICE,
    ClearingResult,
    CommGraph,
    GainSchedule,
    InfeasibleError,
    centralized_clear,
    initial_states,
    run_clearing,
    signed_limits,
    warm_states,
)
from gridcoord.market_curves import (
    DEFAULT_N_SAMPLES,
    DEFAULT_PERIOD_H,
    AggregateCurve,
    ComfortPrefs,
    DemandCurve,
    PriceHistory,
    ResponseCurve,
    SupplyCurve,
    aggregate,
    extract_demand_curve,
    step_approximation,
)
from gridcoord.thermal import DEFAULT_SUBSTEP_H, EtpParams, ThermalState, simulate_period

log = logging.getLogger(__name__)

POLICY_KINDS = ("fraction_of_base", "explicit_series", "zero_island")
CURVE_MODES = ("step", "full")


@dataclass(frozen=True)
class ReferencePolicy:
    """Where the desired feeder consumption of each period comes from."""

    kind: str = "fraction_of_base"
    fraction: float = 0.7
    series: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown reference policy {self.kind!r}; expected one of {POLICY_KINDS}")
        if self.kind == "fraction_of_base" and not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"reference fraction must lie in (0, 1], got {self.fraction}")
        if self.kind == "explicit_series" and not self.series:
            raise ValueError("explicit_series policy needs a non-empty series")

    @property
    def needs_base(self) -> bool:
        return self.kind == "fraction_of_base"

    def check_horizon(self, n_periods: int) -> None:
        if self.kind == "explicit_series" and len(self.series) < n_periods:
            raise ValueError(f"reference series has {len(self.series)} values but the horizon has {n_periods} periods")

    def ref_kw(self, period: int, base_kw: Sequence[float] | None = None) -> float:
        if self.kind == "zero_island":
            return 0.0
        if self.kind == "explicit_series":
            return float(self.series[period])
        if base_kw is None:
            raise ValueError("fraction_of_base policy needs the base-case feeder load")
        return self.fraction * float(base_kw[period])


@dataclass(frozen=True)
class PeriodPlan:
    d_total_kw: float
    d_split: tuple[float, ...]
    forecast_uncontrollable_kw: tuple[float, ...]
    ref_kw: float
    requested_d_kw: float
    clamped: bool = False


@dataclass
class House:
    params: EtpParams
    pref: ComfortPrefs
    state: ThermalState


@dataclass
class Aggregator:
    """A load aggregator: participating houses, passive houses and other local load.

    ``other_load_kw`` holds the period-average non-AC load; passive houses
    keep their setpoint at ``t_desired`` and count as uncontrollable load.
    """

    name: str
    houses: list[House]
    passive: list[House] = field(default_factory=list)
    other_load_kw: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cap_kw: float | None = None
    bootstrap_uncontrollable_kw: float | None = None


@dataclass(frozen=True)
class WeatherInputs:
    """Per-period outdoor temperature (F) and solar fraction in [0, 1]."""

    t_out_f: np.ndarray
    solar_frac: np.ndarray

    def __post_init__(self):
        if len(self.t_out_f) != len(self.solar_frac):
            raise ValueError("weather series must have equal length")

    @property
    def n_periods(self) -> int:
        return len(self.t_out_f)


@dataclass(frozen=True)
class Settings:
    period_h: float = DEFAULT_PERIOD_H
    substep_h: float = DEFAULT_SUBSTEP_H
    n_samples: int = DEFAULT_N_SAMPLES
    curve_mode: str = "step"
    regularize_width: float = 1e-6
    tol_price: float = DEFAULT_TOL_PRICE
    tol_balance_kw: float | None = None
    max_iters: int = DEFAULT_MAX_ITERS
    gains: GainSchedule | None = None
    bootstrap_price: float = 0.1
    bootstrap_sigma: float = 0.02
    price_window: int = 288
    min_price_samples: int = 12
    sigma_floor: float = 0.0
    sampled_houses: int = 3

    def __post_init__(self):
        if self.curve_mode not in CURVE_MODES:
            raise ValueError(f"curve_mode must be one of {CURVE_MODES}, got {self.curve_mode!r}")
        if not (self.period_h > 0.0 and self.substep_h > 0.0):
            raise ValueError("period and sub-step must be positive")
        if self.substep_h > self.period_h:
            raise ValueError("sub-step longer than the period")


@dataclass(frozen=True)
class AggregatorRecord:
    name: str
    price: float
    scheduled_kw: float
    actual_kw: float
    e_min_kw: float
    e_max_kw: float
    uncontrollable_kw: float
    forecast_kw: float
    cap_kw: float | None = None
    local_price: float | None = None  # the agent's price in the coordination layer
    cap_binding: bool = False
    uncapped_price: float | None = None  # same period cleared without any line cap


@dataclass(frozen=True)
class HouseSample:
    aggregator: str
    index: int
    t_air_f: float
    setpoint_f: float
    mode: int


@dataclass(frozen=True)
class PeriodRecord:
    index: int
    t_start_h: float
    clearing: ClearingResult
    aggregators: tuple[AggregatorRecord, ...]
    dg_output_kw: tuple[float, ...]
    uncontrollable_kw: float
    feeder_actual_kw: float
    feeder_desired_kw: float
    plan: PeriodPlan
    fallback: bool = False
    houses: tuple[HouseSample, ...] = ()


def feeder_balance(aggregator_actual_kw: Sequence[float], uncontrollable_kw: float, dg_output_kw: Sequence[float]) -> float:
    """Feeder head load of a lossless feeder; the single place the identity is evaluated."""
    return math.fsum(aggregator_actual_kw) + uncontrollable_kw - math.fsum(dg_output_kw)


def forecast_uncontrollable(history: Sequence[Sequence[float]], bootstrap: Sequence[float]) -> tuple[float, ...]:
    """Persistence forecast per aggregator: last measured period average, else the bootstrap value."""
    return tuple(float(h[-1]) if len(h) else float(b) for h, b in zip(history, bootstrap))


def build_period_plan(
    ref_kw: float,
    forecasts: Sequence[float],
    aggregators: Sequence[AggregateCurve],
    dgs: Sequence[SupplyCurve],
) -> PeriodPlan:
    """Split the dispatch target over the agents (generators first, then aggregators).

    Generators get a zero share; each aggregator gets its uncontrollable
    forecast minus an even share of the reference. A target outside the
    combined feasible range is clamped and flagged, with the correction spread
    evenly over the aggregators.
    """
    n_agg = len(aggregators)
    if n_agg == 0:
        raise ValueError("at least one load aggregator is required to split the reference")
    if len(forecasts) != n_agg:
        raise ValueError("one uncontrollable forecast per aggregator is required")
    share = ref_kw / n_agg
    agg_d = [float(f) - share for f in forecasts]
    requested = math.fsum(agg_d)
    lims = [signed_limits(c) for c in list(dgs) + list(aggregators)]
    lo = math.fsum(a for a, _ in lims)
    hi = math.fsum(b for _, b in lims)
    target = min(max(requested, lo), hi)
    clamped = target != requested
    if clamped:
        log.warning("dispatch target %.3f kW outside feasible range [%.3f, %.3f]; clamped", requested, lo, hi)
        shift = (target - requested) / n_agg
        agg_d = [v + shift for v in agg_d]
    d_split = tuple([0.0] * len(dgs) + agg_d)
    return PeriodPlan(math.fsum(d_split), d_split, tuple(float(f) for f in forecasts), float(ref_kw), requested, clamped)


def apply_line_limit(curve: AggregateCurve, cap_kw: float) -> AggregateCurve:
    """Limit an aggregator's maximum consumption before clearing."""
    if cap_kw < curve.p_min_kw:
        raise InfeasibleError(f"line cap {cap_kw} kW is below the aggregator's minimum consumption {curve.p_min_kw} kW")
    if cap_kw >= curve.p_max_kw:
        return curve
    return curve.with_cap(cap_kw)


def _advance(houses: Sequence[House], t_out: float, solar: float, setpoints: Sequence[float],
             period_h: float, substep_h: float) -> tuple[list[ThermalState], float]:
    """Simulate houses over one period; returns final states and total average power (kW)."""
    states = []
    energy = []
    for h, sp in zip(houses, setpoints):
        model = h.params.model(t_out, solar, h.pref)
        s, e = simulate_period(model, h.state, sp, period_h, substep_h)
        states.append(s)
        energy.append(e)
    return states, math.fsum(energy) / period_h


def base_case(aggregators: Sequence[Aggregator], weather: WeatherInputs, settings: Settings) -> np.ndarray:
    """Feeder load without generators or demand response: every AC holds ``t_desired``."""
    n = weather.n_periods
    load = np.zeros(n)
    for agg in aggregators:
        houses = [replace(h) for h in list(agg.houses) + list(agg.passive)]
        setpoints = [h.pref.t_desired_f for h in houses]
        for t in range(n):
            states, kw = _advance(houses, weather.t_out_f[t], weather.solar_frac[t], setpoints,
                                  settings.period_h, settings.substep_h)
            for h, s in zip(houses, states):
                h.state = s
            load[t] += kw + float(agg.other_load_kw[t])
    return load


class FeederSimulation:
    """Sequential period loop; all state carried between periods lives here."""

    def __init__(
        self,
        aggregators: Sequence[Aggregator],
        dgs: Sequence[SupplyCurve],
        graph: CommGraph,
        weather: WeatherInputs,
        settings: Settings = Settings(),
        policy: ReferencePolicy = ReferencePolicy(),
        base_load_kw: Sequence[float] | None = None,
    ):
        if graph.n_agents != len(dgs) + len(aggregators):
            raise ValueError(
                f"graph has {graph.n_agents} agents; expected {len(dgs)} generators + {len(aggregators)} aggregators"
            )
        n = weather.n_periods
        for agg in aggregators:
            if len(agg.other_load_kw) < n:
                raise ValueError(f"aggregator {agg.name!r}: uncontrollable load series shorter than the horizon")
        policy.check_horizon(n)
        self.aggregators = list(aggregators)
        self.dgs = list(dgs)
        self.graph = graph
        self.weather = weather
        self.settings = settings
        self.policy = policy
        if policy.needs_base and base_load_kw is None:
            base_load_kw = base_case(self.aggregators, weather, settings)
        self.base_load_kw = None if base_load_kw is None else np.asarray(base_load_kw, dtype=float)
        self.histories = [
            PriceHistory(settings.bootstrap_price, settings.bootstrap_sigma, settings.price_window,
                         settings.min_price_samples, settings.sigma_floor)
            for _ in self.aggregators
        ]
        self.measured_uncontrollable: list[list[float]] = [[] for _ in self.aggregators]
        self.previous: ClearingResult | None = None
        self.period = 0

    @property
    def n_periods(self) -> int:
        return self.weather.n_periods

    def _bootstrap_uncontrollable(self) -> list[float]:
        out = []
        for agg in self.aggregators:
            if agg.bootstrap_uncontrollable_kw is not None:
                out.append(float(agg.bootstrap_uncontrollable_kw))
            else:
                # half-duty guess for the passive air conditioners plus the first load sample
                ac = sum(h.params.rated_power_kw for h in agg.passive)
                out.append(0.5 * ac + float(agg.other_load_kw[0]))
        return out

    def house_curves(self, t: int) -> list[tuple[list[DemandCurve], list[ResponseCurve]]]:
        """Per-house demand curves (as exchanged) and response curves for period ``t``."""
        s = self.settings
        t_out, solar = self.weather.t_out_f[t], self.weather.solar_frac[t]
        n_samples = s.n_samples if s.curve_mode == "full" else 0
        out = []
        for agg, hist in zip(self.aggregators, self.histories):
            stats = hist.stats()
            rcs, curves = [], []
            for h in agg.houses:
                rc = ResponseCurve(h.pref, stats)
                model = h.params.model(t_out, solar, h.pref)
                dc = extract_demand_curve(model, h.state, rc, s.period_h, n_samples, s.substep_h)
                curves.append(step_approximation(dc) if s.curve_mode == "step" else dc)
                rcs.append(rc)
            out.append((curves, rcs))
        return out

    def collect_curves(self, t: int) -> tuple[list[AggregateCurve], list[AggregateCurve], list[list[ResponseCurve]]]:
        """Extract and aggregate this period's demand curves; returns (uncapped, capped, response curves)."""
        uncapped, capped, responses = [], [], []
        for agg, hist, (curves, rcs) in zip(self.aggregators, self.histories, self.house_curves(t)):
            if curves:
                curve = aggregate(curves, self.settings.regularize_width)
            else:
                curve = AggregateCurve(np.array([hist.stats().lambda_avg]), np.array([0.0]), 0.0, 0.0)
            uncapped.append(curve)
            capped.append(apply_line_limit(curve, agg.cap_kw) if agg.cap_kw is not None else curve)
            responses.append(rcs)
        return uncapped, capped, responses

    def prepare_period(self) -> tuple[PeriodPlan, list]:
        """Plan and agent curves (generators first) of the next period, without advancing."""
        if self.period >= self.n_periods:
            raise IndexError("simulation horizon exhausted")
        _, capped, _ = self.collect_curves(self.period)
        forecasts = forecast_uncontrollable(self.measured_uncontrollable, self._bootstrap_uncontrollable())
        plan = build_period_plan(self.policy.ref_kw(self.period, self.base_load_kw), forecasts, capped, self.dgs)
        return plan, list(self.dgs) + list(capped)

    def distributed(self, plan: PeriodPlan, curves: Sequence) -> ClearingResult:
        """One run of the distributed clearing, warm-started from the previous period when possible."""
        s = self.settings
        gains = s.gains or GainSchedule.tuned(self.graph, curves)
        if self.previous is not None and len(self.previous.lambdas) == len(curves):
            states = warm_states(curves, plan.d_split, self.previous)
        else:
            states = initial_states(curves, plan.d_split, self.histories[0].stats().lambda_avg)
        return run_clearing(states, self.graph, gains, s.tol_price, s.tol_balance_kw, s.max_iters)

    def clear(self, plan: PeriodPlan, curves: Sequence) -> tuple[ClearingResult, bool]:
        """Distributed clearing; falls back to the oracle when it does not converge."""
        result = self.distributed(plan, curves)
        if result.converged:
            return result, False
        log.warning(
            "period %d: distributed clearing did not converge in %d rounds (spread %.3g, mismatch %.3g kW); "
            "using the centralized solution",
            self.period, result.iterations, result.price_spread, result.balance_mismatch_kw,
        )
        return centralized_clear(curves, plan.d_total_kw), True

    def _uncapped_price(self, ref: float, forecasts, uncapped) -> float:
        """Price of the same period's problem with every line cap lifted (oracle clearing)."""
        plan = build_period_plan(ref, forecasts, uncapped, self.dgs)
        return centralized_clear(list(self.dgs) + list(uncapped), plan.d_total_kw).lambda_star

    def _broadcast_price(self, j: int, local_price: float, uncapped: AggregateCurve) -> float:
        cap = self.aggregators[j].cap_kw
        if cap is None or cap >= uncapped.p_max_kw:
            return local_price
        # a binding cap: the aggregator's marginal utility at its bound
        if uncapped.evaluate(local_price) > cap:
            return max(local_price, uncapped.price_at(cap))
        return local_price

    def _setpoints(self, responses: Sequence[ResponseCurve], price: float) -> list[float]:
        return [rc.price_to_setpoint(price) for rc in responses]

    def run_period(self) -> PeriodRecord:
        t = self.period
        if t >= self.n_periods:
            raise IndexError("simulation horizon exhausted")
        s = self.settings
        t_out, solar = self.weather.t_out_f[t], self.weather.solar_frac[t]
        uncapped, capped, responses = self.collect_curves(t)
        forecasts = forecast_uncontrollable(self.measured_uncontrollable, self._bootstrap_uncontrollable())
        ref = self.policy.ref_kw(t, self.base_load_kw)
        plan = build_period_plan(ref, forecasts, capped, self.dgs)
        curves = list(self.dgs) + list(capped)
        result, fallback = self.clear(plan, curves)
        n_dg = len(self.dgs)
        counterfactual = None
        if any(a.cap_kw is not None for a in self.aggregators):
            counterfactual = self._uncapped_price(ref, forecasts, uncapped)

        agg_records, samples, agg_actual, uncontr = [], [], [], []
        for j, agg in enumerate(self.aggregators):
            local = result.lambdas[n_dg + j] if result.lambdas else result.lambda_star
            price = self._broadcast_price(j, float(local), uncapped[j])
            binding = price > local
            setpoints = self._setpoints(responses[j], price)
            states, actual = _advance(agg.houses, t_out, solar, setpoints, s.period_h, s.substep_h)
            if agg.cap_kw is not None and actual > agg.cap_kw:
                price, setpoints, states, actual = self._enforce_cap(j, price, uncapped[j], responses[j], t_out, solar)
                binding = True
            passive_sp = [h.pref.t_desired_f for h in agg.passive]
            p_states, passive_kw = _advance(agg.passive, t_out, solar, passive_sp, s.period_h, s.substep_h)
            for h, st in zip(agg.houses, states):
                h.state = st
            for h, st in zip(agg.passive, p_states):
                h.state = st
            u = passive_kw + float(agg.other_load_kw[t])
            self.measured_uncontrollable[j].append(u)
            self.histories[j].push(price)
            agg_actual.append(actual)
            uncontr.append(u)
            for i, (h, sp) in enumerate(zip(agg.houses[: s.sampled_houses], setpoints)):
                samples.append(HouseSample(agg.name, i, h.state.t_air_f, sp, h.state.mode))
            agg_records.append(
                AggregatorRecord(
                    name=agg.name,
                    price=price,
                    scheduled_kw=-float(result.powers[n_dg + j]),
                    actual_kw=actual,
                    e_min_kw=capped[j].p_min_kw,
                    e_max_kw=capped[j].p_max_kw,
                    uncontrollable_kw=u,
                    forecast_kw=forecasts[j],
                    cap_kw=agg.cap_kw,
                    local_price=float(local),
                    cap_binding=binding,
                    uncapped_price=None if agg.cap_kw is None else counterfactual,
                )
            )
        dg_out = tuple(float(p) for p in result.powers[:n_dg])
        total_uncontr = math.fsum(uncontr)
        record = PeriodRecord(
            index=t,
            t_start_h=t * s.period_h,
            clearing=result,
            aggregators=tuple(agg_records),
            dg_output_kw=dg_out,
            uncontrollable_kw=total_uncontr,
            feeder_actual_kw=feeder_balance(agg_actual, total_uncontr, dg_out),
            feeder_desired_kw=ref,
            plan=plan,
            fallback=fallback,
            houses=tuple(samples),
        )
        self.previous = result
        self.period += 1
        return record

    def _enforce_cap(self, j, price, uncapped, responses, t_out, solar):
        """Raise the broadcast price until the replayed consumption respects the cap.

        The curve exchanged with the coordination layer is an approximation of
        the devices' response, so the price at the cap can still let the houses
        draw slightly more. The aggregator replays its houses at trial prices
        (bisection) before broadcasting.
        """
        s = self.settings
        agg = self.aggregators[j]
        lo, hi = price, max(float(uncapped.prices[-1]), price)
        step = max(hi - lo, 1e-3)
        while True:
            sp = self._setpoints(responses, hi)
            states, kw = _advance(agg.houses, t_out, solar, sp, s.period_h, s.substep_h)
            if kw <= agg.cap_kw:
                break
            lo, hi = hi, hi + step
            step *= 2.0
            if step > 1e3:
                raise InfeasibleError(f"aggregator {agg.name!r} cannot be held below its cap of {agg.cap_kw} kW")
        best = (hi, sp, states, kw)
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if not lo < mid < hi:
                break
            sp = self._setpoints(responses, mid)
            states, kw = _advance(agg.houses, t_out, solar, sp, s.period_h, s.substep_h)
            if kw <= agg.cap_kw:
                hi, best = mid, (mid, sp, states, kw)
            else:
                lo = mid
            if hi - lo <= 1e-7:
                break
        log.info("period %d: aggregator %s price raised to %.6f to hold its cap", self.period, agg.name, best[0])
        return best

    def run(self, n_periods: int | None = None) -> list[PeriodRecord]:
        n = self.n_periods - self.period if n_periods is None else n_periods
        return [self.run_period() for _ in range(n)]

"""Price/power curves exchanged between the device and coordination layers.

Demand curves map a price ($/kWh) to the average power (kW) a device or an
aggregation will draw over one scheduling period; they are non-increasing in
price. Supply curves are the marginal costs of quadratic-cost generators.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from gridcoord.thermal import (
    DEFAULT_SUBSTEP_H,
    OFF,
    ON,
    HouseModel,
    ThermalState,
    average_power_kw,
    extremal_air_temp,
)

DEFAULT_PERIOD_H = 5.0 / 60.0
DEFAULT_N_SAMPLES = 10
# setpoint slack (F) that keeps whole-period ON/OFF setpoints strictly feasible
FEASIBILITY_MARGIN_F = 1e-5


class DomainError(ValueError):
    """Argument outside the domain of a curve operation."""


@dataclass(frozen=True)
class ComfortPrefs:
    t_desired_f: float
    t_min_f: float
    t_max_f: float
    k_tradeoff: float

    def __post_init__(self):
        if not (self.t_min_f <= self.t_desired_f <= self.t_max_f):
            raise ValueError(
                f"comfort bounds must satisfy t_min <= t_desired <= t_max, got "
                f"{self.t_min_f}, {self.t_desired_f}, {self.t_max_f}"
            )
        if not self.k_tradeoff >= 0.0:
            raise ValueError("k_tradeoff must be non-negative")


@dataclass(frozen=True)
class PriceStats:
    lambda_avg: float
    sigma: float
    window: int = 0

    def __post_init__(self):
        if not self.sigma >= 0.0:
            raise ValueError("sigma must be non-negative")


class PriceHistory:
    """Trailing window of clearing prices feeding the customers' response curves.

    Until ``min_samples`` prices have been seen the bootstrap mean and standard
    deviation are reported unchanged.
    """

    def __init__(self, bootstrap_price: float, bootstrap_sigma: float, window: int, min_samples: int = 12,
                 sigma_floor: float = 0.0):
        if window < 1:
            raise ValueError("price window must hold at least one price")
        self.bootstrap = PriceStats(bootstrap_price, bootstrap_sigma, 0)
        self.min_samples = min_samples
        self.sigma_floor = sigma_floor
        self._prices: deque[float] = deque(maxlen=window)

    def push(self, price: float) -> None:
        self._prices.append(float(price))

    def stats(self) -> PriceStats:
        n = len(self._prices)
        if n < max(self.min_samples, 1):
            return self.bootstrap
        arr = np.fromiter(self._prices, dtype=float, count=n)
        return PriceStats(float(arr.mean()), max(float(arr.std()), self.sigma_floor), n)


@dataclass(frozen=True)
class ResponseCurve:
    """Piecewise-linear price/setpoint relation anchored at ``(t_desired, lambda_avg)``.

    Above the desired setpoint the price rises by ``k * sigma`` over
    ``[t_desired, t_max]``; below it falls by ``k * sigma`` over
    ``[t_min, t_desired]``.
    """

    pref: ComfortPrefs
    stats: PriceStats

    @property
    def spread(self) -> float:
        return self.pref.k_tradeoff * self.stats.sigma

    def setpoint_to_price(self, setpoint_f: float) -> float:
        p = self.pref
        if not (p.t_min_f <= setpoint_f <= p.t_max_f):
            raise DomainError(f"setpoint {setpoint_f} outside [{p.t_min_f}, {p.t_max_f}]")
        avg = self.stats.lambda_avg
        if setpoint_f >= p.t_desired_f:
            span = p.t_max_f - p.t_desired_f
            return avg if span == 0.0 else avg + self.spread * (setpoint_f - p.t_desired_f) / span
        span = p.t_desired_f - p.t_min_f
        return avg if span == 0.0 else avg - self.spread * (p.t_desired_f - setpoint_f) / span

    def price_to_setpoint(self, price: float) -> float:
        p = self.pref
        avg = self.stats.lambda_avg
        if self.spread == 0.0:
            # degenerate flat curve (k = 0 or no price variation): hold the anchor
            return p.t_desired_f
        if price >= avg:
            if price >= self.setpoint_to_price(p.t_max_f):
                return p.t_max_f
            return p.t_desired_f + (price - avg) * (p.t_max_f - p.t_desired_f) / self.spread
        if price <= self.setpoint_to_price(p.t_min_f):
            return p.t_min_f
        return p.t_desired_f - (avg - price) * (p.t_desired_f - p.t_min_f) / self.spread


def setpoint_to_price(curve: ResponseCurve, setpoint_f: float) -> float:
    return curve.setpoint_to_price(setpoint_f)


def price_to_setpoint(curve: ResponseCurve, price: float) -> float:
    return curve.price_to_setpoint(price)


class PriceCurve(Protocol):
    p_min_kw: float
    p_max_kw: float

    def breakpoints(self) -> tuple[np.ndarray, np.ndarray]: ...


def evaluate_breakpoints(prices: np.ndarray, powers: np.ndarray, x, side: str = "left"):
    """Evaluate a piecewise-linear curve given by sorted breakpoints.

    Outside the breakpoint range the curve is flat. At a vertical segment (a
    repeated price) ``side="left"`` returns the value approached from lower
    prices and ``side="right"`` the value approached from higher prices.
    """
    x_arr = np.asarray(x, dtype=float)
    n = len(prices)
    if n == 1:
        out = np.full(x_arr.shape, powers[0], dtype=float)
        return out if out.ndim else float(out)
    idx = np.searchsorted(prices, x_arr, side=side)
    lo = np.clip(idx - 1, 0, n - 1)
    hi = np.clip(idx, 0, n - 1)
    x0, x1 = prices[lo], prices[hi]
    y0, y1 = powers[lo], powers[hi]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(x1 > x0, (x_arr - x0) / np.where(x1 > x0, x1 - x0, 1.0), 0.0)
    out = y0 + frac * (y1 - y0)
    if side == "left":
        out = np.where(hi < n, np.where(x1 == x_arr, y1, out), out)
    else:
        out = np.where(x0 == x_arr, y0, out)
    out = np.where(idx == 0, powers[0], out)
    out = np.where(idx >= n, powers[-1], out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class DemandCurve:
    e_max_kw: float
    e_min_kw: float
    lambda_min: float
    lambda_max: float
    samples: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple((float(a), float(b)) for a, b in self.samples))
        if not (0.0 <= self.e_min_kw <= self.e_max_kw):
            raise ValueError(f"demand bounds must satisfy 0 <= e_min <= e_max, got {self.e_min_kw}, {self.e_max_kw}")
        if not self.lambda_min <= self.lambda_max:
            raise ValueError("lambda_min must not exceed lambda_max")

    @property
    def p_min_kw(self) -> float:
        return self.e_min_kw

    @property
    def p_max_kw(self) -> float:
        return self.e_max_kw

    @property
    def is_step(self) -> bool:
        return self.lambda_min == self.lambda_max and not self.samples

    def breakpoints(self) -> tuple[np.ndarray, np.ndarray]:
        prices = [self.lambda_min] + [s[0] for s in self.samples] + [self.lambda_max]
        powers = [self.e_max_kw] + [s[1] for s in self.samples] + [self.e_min_kw]
        return np.array(prices), np.array(powers)

    def evaluate(self, price, side: str = "left"):
        prices, powers = self.breakpoints()
        return evaluate_breakpoints(prices, powers, price, side)

    def to_dict(self) -> dict:
        return {
            "e_min": self.e_min_kw,
            "e_max": self.e_max_kw,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "samples": [list(s) for s in self.samples],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DemandCurve":
        return cls(
            e_max_kw=float(d["e_max"]),
            e_min_kw=float(d["e_min"]),
            lambda_min=float(d["lambda_min"]),
            lambda_max=float(d["lambda_max"]),
            samples=tuple(tuple(s) for s in d.get("samples", [])),
        )

    @classmethod
    def from_breakpoints(cls, prices: Sequence[float], powers: Sequence[float]) -> "DemandCurve":
        return cls(
            e_max_kw=float(powers[0]),
            e_min_kw=float(powers[-1]),
            lambda_min=float(prices[0]),
            lambda_max=float(prices[-1]),
            samples=tuple(zip(prices[1:-1], powers[1:-1])),
        )


@dataclass(frozen=True)
class AggregateCurve:
    prices: np.ndarray
    powers: np.ndarray
    p_min_kw: float
    p_max_kw: float

    def breakpoints(self) -> tuple[np.ndarray, np.ndarray]:
        return self.prices, self.powers

    def evaluate(self, price, side: str = "left"):
        return evaluate_breakpoints(self.prices, self.powers, price, side)

    def with_cap(self, cap_kw: float) -> "AggregateCurve":
        """Curve with consumption limited to ``cap_kw`` at every price."""
        return AggregateCurve(
            self.prices, np.minimum(self.powers, cap_kw), min(self.p_min_kw, cap_kw), min(self.p_max_kw, cap_kw)
        )

    def price_at(self, power_kw: float) -> float:
        """Lowest price at which the demand does not exceed ``power_kw``."""
        prices, powers = self.prices, self.powers
        if power_kw >= powers[0]:
            return float(prices[0])
        if power_kw < powers[-1]:
            raise DomainError(f"{power_kw} kW is below the minimum demand {powers[-1]} kW")
        for i in range(1, len(prices)):
            if powers[i] <= power_kw:
                y0, y1 = powers[i - 1], powers[i]
                if prices[i] == prices[i - 1] or y0 == y1:
                    return float(prices[i])
                return float(prices[i - 1] + (y0 - power_kw) * (prices[i] - prices[i - 1]) / (y0 - y1))
        return float(prices[-1])  # pragma: no cover - guarded above

    def to_dict(self) -> dict:
        return {
            "p_min": self.p_min_kw,
            "p_max": self.p_max_kw,
            "breakpoints": [[float(a), float(b)] for a, b in zip(self.prices, self.powers)],
        }


@dataclass(frozen=True)
class SupplyCurve:
    a: float
    b: float
    c: float
    p_min_kw: float
    p_max_kw: float
    name: str = ""

    def __post_init__(self):
        if not self.a > 0.0:
            raise ValueError(f"supply curve {self.name!r}: quadratic coefficient a must be positive")
        if not (0.0 <= self.p_min_kw <= self.p_max_kw):
            raise ValueError(f"supply curve {self.name!r}: need 0 <= p_min <= p_max")

    def cost(self, p_kw: float) -> float:
        return self.a * p_kw * p_kw + self.b * p_kw + self.c

    def marginal_cost(self, p_kw):
        return 2.0 * self.a * np.asarray(p_kw, dtype=float) + self.b

    def inverse(self, price):
        return supply_inverse(self, price)

    def scaled(self, factor: float) -> "SupplyCurve":
        """Same marginal-cost curve over power ranges multiplied by ``factor``."""
        return SupplyCurve(self.a / factor, self.b, self.c * factor, self.p_min_kw * factor,
                           self.p_max_kw * factor, self.name)


def supply_inverse(curve: SupplyCurve, price):
    p = (np.asarray(price, dtype=float) - curve.b) / (2.0 * curve.a)
    out = np.clip(p, curve.p_min_kw, curve.p_max_kw)
    return out if out.ndim else float(out)


def response_curve(pref: ComfortPrefs, stats: PriceStats) -> ResponseCurve:
    return ResponseCurve(pref, stats)


def extract_demand_curve(
    model: HouseModel,
    state: ThermalState,
    curve: ResponseCurve,
    period: float = DEFAULT_PERIOD_H,
    n_samples: int = DEFAULT_N_SAMPLES,
    substep: float = DEFAULT_SUBSTEP_H,
) -> DemandCurve:
    """Demand curve of one air conditioner for the coming period.

    The setpoint keeping the compressor ON for the whole period is bounded by
    the lowest air temperature on the ON trajectory, and the one keeping it OFF
    by the highest temperature on the OFF trajectory, each shifted by half the
    deadband according to the initial mode. When those setpoints fall outside
    the comfort range the bound is found by simulating at the range limit.
    """
    if period <= 0.0:
        raise ValueError("period must be positive")
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    pref = curve.pref
    half = model.deadband_f / 2.0
    shift = half if state.mode == ON else -half
    t_set_on = extremal_air_temp(model, state, ON, period, "min") + shift - FEASIBILITY_MARGIN_F
    t_set_off = extremal_air_temp(model, state, OFF, period, "max") + shift + FEASIBILITY_MARGIN_F

    def power_at(sp: float) -> float:
        return average_power_kw(model, state, sp, period, substep)

    if t_set_on >= pref.t_min_f:
        sp_lo = min(t_set_on, pref.t_max_f)
        e_max = model.rated_power_kw
    else:
        sp_lo = pref.t_min_f
        # summed sub-step on-times can exceed the period by an ulp
        e_max = min(power_at(sp_lo), model.rated_power_kw)
    if t_set_off <= pref.t_max_f:
        sp_hi = max(t_set_off, pref.t_min_f)
        e_min = 0.0
    else:
        sp_hi = pref.t_max_f
        e_min = power_at(sp_hi)
    e_min = min(e_min, e_max)
    lam_min = curve.setpoint_to_price(sp_lo)
    lam_max = curve.setpoint_to_price(sp_hi)

    samples: list[tuple[float, float]] = []
    if n_samples and lam_max > lam_min and sp_hi > sp_lo:
        setpoints = [sp_lo + (sp_hi - sp_lo) * j / (n_samples + 1) for j in range(1, n_samples + 1)]
        raw = np.array([power_at(sp) for sp in setpoints])
        # thermostat cycling can make the finite-period response non-monotone;
        # keep the curve non-increasing and inside [e_min, e_max]
        mono = np.clip(np.minimum.accumulate(np.concatenate(([e_max], raw)))[1:], e_min, e_max)
        samples = [(curve.setpoint_to_price(sp), float(q)) for sp, q in zip(setpoints, mono)]
    return DemandCurve(e_max, e_min, lam_min, lam_max, tuple(samples))


def step_approximation(curve: DemandCurve) -> DemandCurve:
    mid = 0.5 * (curve.lambda_min + curve.lambda_max)
    if curve.is_step:
        return curve
    return DemandCurve(curve.e_max_kw, curve.e_min_kw, mid, mid, ())


def _spread_verticals(prices: np.ndarray, powers: np.ndarray, width: float) -> np.ndarray:
    """Replace each vertical run of breakpoints by a ramp at most ``width`` wide."""
    prices = prices.astype(float).copy()
    n = len(prices)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and prices[j + 1] == prices[i]:
            j += 1
        if j > i:
            u = prices[i]
            h = width / 2.0
            if i > 0:
                h = min(h, (u - prices[i - 1]) / 2.0)
            if j + 1 < n:
                h = min(h, (prices[j + 1] - u) / 2.0)
            prices[i:j + 1] = np.linspace(u - h, u + h, j - i + 1)
        i = j + 1
    return prices


def regularize(curve: DemandCurve, width: float) -> DemandCurve:
    """Turn vertical steps into ramps of ``width`` $/kWh so the inverse is single-valued."""
    if width <= 0.0:
        return curve
    prices, powers = curve.breakpoints()
    return DemandCurve.from_breakpoints(_spread_verticals(prices, powers, width), powers)


def aggregate(curves: Iterable[PriceCurve], regularize_width: float = 0.0) -> AggregateCurve:
    """Horizontal sum of demand curves.

    At each member breakpoint price both one-sided limits are summed, so
    steps in the members remain steps in the aggregate and the result is exact
    between breakpoints.
    """
    members = list(curves)
    if not members:
        raise DomainError("cannot aggregate an empty list of curves")
    if regularize_width > 0.0:
        members = [regularize(c, regularize_width) if isinstance(c, DemandCurve) else c for c in members]
    bps = [m.breakpoints() for m in members]
    grid = np.unique(np.concatenate([p for p, _ in bps]))
    left = np.zeros(len(grid))
    right = np.zeros(len(grid))
    for prices, powers in bps:
        left += evaluate_breakpoints(prices, powers, grid, "left")
        right += evaluate_breakpoints(prices, powers, grid, "right")
    out_p: list[float] = []
    out_q: list[float] = []
    for u, lv, rv in zip(grid, left, right):
        out_p.append(u)
        out_q.append(lv)
        if rv != lv:
            out_p.append(u)
            out_q.append(rv)
    p_min = math.fsum(m.p_min_kw for m in members)
    p_max = math.fsum(m.p_max_kw for m in members)
    # the running sums can stray an ulp outside the exactly summed limits
    return AggregateCurve(np.array(out_p), np.clip(out_q, p_min, p_max), p_min, p_max)

"""Air-conditioner thermal dynamics: two-state ETP model under hysteresis control.

Temperatures are in degrees Fahrenheit and time in hours throughout. The
outdoor temperature and heat gains are folded into the constant input vectors
``b_on``/``b_off``, so a :class:`HouseModel` is valid for one scheduling period
and is rebuilt from :class:`EtpParams` whenever the weather changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numba
import numpy as np

if TYPE_CHECKING:
    from gridcoord.market_curves import ComfortPrefs

ON = 1
OFF = 0

# grid spacing (h) for trajectory scans before local refinement
SCAN_STEP_H = 1e-3
# bisection tolerance (h) on switching instants
SWITCH_TOL_H = 1e-6
# default real-time control sub-step: 30 s
DEFAULT_SUBSTEP_H = 30.0 / 3600.0
# eigenvalue gap below which the 2x2 exponential uses its Taylor form
_DEFECTIVE_GAP = 1e-9
_MAX_SWITCHES = 100_000
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
BTU_PER_KWH = 3412.142


class ModelValidationError(ValueError):
    """A house model violates a structural invariant (not Hurwitz, not cooling)."""


@dataclass(frozen=True)
class HouseModel:
    a_matrix: np.ndarray
    b_on: np.ndarray
    b_off: np.ndarray
    rated_power_kw: float
    deadband_f: float
    comfort: ComfortPrefs | None = None

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float).reshape(2, 2)
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_on", np.asarray(self.b_on, dtype=float).reshape(2))
        object.__setattr__(self, "b_off", np.asarray(self.b_off, dtype=float).reshape(2))

    def validate(self) -> "HouseModel":
        a = self.a_matrix
        if not np.all(np.isfinite(a)) or not np.all(np.isfinite(self.b_on)) or not np.all(np.isfinite(self.b_off)):
            raise ModelValidationError("house model has non-finite entries")
        trace = a[0, 0] + a[1, 1]
        det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
        # 2x2 Routh-Hurwitz: both eigenvalues in the open left half-plane
        if not (trace < 0.0 and det > 0.0):
            raise ModelValidationError(f"a_matrix is not Hurwitz (trace={trace:.6g}, det={det:.6g})")
        if not (self.rated_power_kw > 0.0):
            raise ModelValidationError("rated_power_kw must be positive")
        if not (self.deadband_f > 0.0):
            raise ModelValidationError("deadband_f must be positive")
        t_on = self.equilibrium(ON)[0]
        t_off = self.equilibrium(OFF)[0]
        if not t_off > t_on:
            raise ModelValidationError(
                f"not a cooling device: OFF equilibrium {t_off:.3f}F <= ON equilibrium {t_on:.3f}F"
            )
        return self

    def b(self, mode: int) -> np.ndarray:
        return self.b_on if mode == ON else self.b_off

    def equilibrium(self, mode: int) -> np.ndarray:
        """Fixed point ``-A^{-1} b`` of the dynamics with the compressor held in ``mode``."""
        return -_solve2(self.a_matrix, self.b(mode))


@dataclass(frozen=True)
class ThermalState:
    t_air_f: float
    t_mass_f: float
    mode: int = OFF

    def __post_init__(self):
        if not (math.isfinite(self.t_air_f) and math.isfinite(self.t_mass_f)):
            raise ValueError("thermal state temperatures must be finite")
        if self.mode not in (ON, OFF):
            raise ValueError(f"mode must be 0 or 1, got {self.mode!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.t_air_f, self.t_mass_f])


@dataclass(frozen=True)
class EtpParams:
    """Physical parameters of one house, in BTU, hours and degrees F.

    The air node exchanges heat with outdoors through ``ua`` and with the
    building mass through ``hm``; the compressor removes ``cooling_btuh`` from
    the air node and draws ``cooling_btuh / cop`` of electrical power.
    """

    ua: float
    ca: float
    cm: float
    hm: float
    cooling_btuh: float
    cop: float
    internal_gain_btuh: float = 0.0
    solar_gain_btuh: float = 0.0
    mass_gain_frac: float = 0.5
    deadband_f: float = 2.0

    @property
    def rated_power_kw(self) -> float:
        return self.cooling_btuh / self.cop / BTU_PER_KWH

    def model(self, t_out_f: float, solar_frac: float = 0.0, comfort: ComfortPrefs | None = None) -> HouseModel:
        a = np.array(
            [
                [-(self.ua + self.hm) / self.ca, self.hm / self.ca],
                [self.hm / self.cm, -self.hm / self.cm],
            ]
        )
        solar = self.solar_gain_btuh * max(solar_frac, 0.0)
        q_air = self.internal_gain_btuh + (1.0 - self.mass_gain_frac) * solar
        q_mass = self.mass_gain_frac * solar
        b_off = np.array([(self.ua * t_out_f + q_air) / self.ca, q_mass / self.cm])
        b_on = b_off - np.array([self.cooling_btuh / self.ca, 0.0])
        return HouseModel(a, b_on, b_off, self.rated_power_kw, self.deadband_f, comfort)


def _solve2(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if det == 0.0:
        raise ModelValidationError("a_matrix is singular")
    return np.array([(a[1, 1] * v[0] - a[0, 1] * v[1]) / det, (a[0, 0] * v[1] - a[1, 0] * v[0]) / det])


def expm2(a: np.ndarray, t):
    """Entries ``(e00, e01, e10, e11)`` of ``exp(a * t)`` for a 2x2 matrix.

    ``t`` may be a scalar or an array. Uses the spectral projectors of the two
    eigenvalues ``m +/- s``; complex pairs use the rotation form and a nearly
    defective matrix switches to a Taylor expansion of ``sinh(s t)/s``.
    """
    a00, a01, a10, a11 = float(a[0, 0]), float(a[0, 1]), float(a[1, 0]), float(a[1, 1])
    m = 0.5 * (a00 + a11)
    h = 0.5 * (a00 - a11)
    s2 = h * h + a01 * a10
    t = np.asarray(t, dtype=float)
    if s2 > 0.0 and 2.0 * math.sqrt(s2) >= _DEFECTIVE_GAP:
        s = math.sqrt(s2)
        e1 = np.exp((m + s) * t)
        e2 = np.exp((m - s) * t)
        c = 0.5 * (e1 + e2)
        sh = 0.5 * (e1 - e2) / s
    elif s2 < 0.0 and 2.0 * math.sqrt(-s2) >= _DEFECTIVE_GAP:
        w = math.sqrt(-s2)
        em = np.exp(m * t)
        c = em * np.cos(w * t)
        sh = em * np.sin(w * t) / w
    else:
        em = np.exp(m * t)
        tt = t * t
        c = em * (1.0 + s2 * tt / 2.0 + s2 * s2 * tt * tt / 24.0)
        sh = em * t * (1.0 + s2 * tt / 6.0 + s2 * s2 * tt * tt / 120.0)
    return c + sh * h, sh * a01, sh * a10, c - sh * h


class _Trajectory:
    """Closed-form state trajectory from ``x0`` with the compressor mode fixed."""

    __slots__ = ("a", "eq", "dev")

    def __init__(self, model: HouseModel, x0: np.ndarray, mode: int):
        self.a = model.a_matrix
        self.eq = model.equilibrium(mode)
        self.dev = np.asarray(x0, dtype=float) - self.eq

    def state(self, t: float) -> np.ndarray:
        e00, e01, e10, e11 = expm2(self.a, t)
        d0, d1 = self.dev
        return np.array([self.eq[0] + e00 * d0 + e01 * d1, self.eq[1] + e10 * d0 + e11 * d1], dtype=float)

    def air(self, t):
        e00, e01, _, _ = expm2(self.a, t)
        return self.eq[0] + e00 * self.dev[0] + e01 * self.dev[1]


def propagate_closed_form(model: HouseModel, state: ThermalState, mode: int, dt: float) -> ThermalState:
    """Exact solution ``x(dt) = e^{A dt} x0 + A^{-1}(e^{A dt} - I) b_mode`` of the linear ODE.

    The returned state keeps ``state.mode``; ``mode`` only selects the input
    vector used over the interval.
    """
    if dt < 0.0:
        raise ValueError("dt must be non-negative")
    if dt == 0.0:
        return state
    x = _Trajectory(model, state.as_array(), mode).state(dt)
    return ThermalState(float(x[0]), float(x[1]), state.mode)


def _scan_grid(horizon: float) -> np.ndarray:
    n = max(2, int(math.ceil(horizon / SCAN_STEP_H)))
    return np.linspace(0.0, horizon, n + 1)


def _golden(f, lo: float, hi: float, tol: float = 1e-9) -> tuple[float, float]:
    """Minimise a unimodal ``f`` on ``[lo, hi]``; returns ``(t, f(t))``."""
    c = hi - _INV_PHI * (hi - lo)
    d = lo + _INV_PHI * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - _INV_PHI * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _INV_PHI * (hi - lo)
            fd = f(d)
    t = 0.5 * (lo + hi)
    return t, f(t)


def extremal_air_temp(
    model: HouseModel,
    state: ThermalState,
    mode: int,
    horizon: float,
    which: Literal["min", "max"],
) -> float:
    """Minimum or maximum of the closed-form air temperature over ``[0, horizon]``."""
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    if which not in ("min", "max"):
        raise ValueError(f"which must be 'min' or 'max', got {which!r}")
    traj = _Trajectory(model, state.as_array(), mode)
    sign = 1.0 if which == "min" else -1.0
    grid = _scan_grid(horizon)
    vals = sign * traj.air(grid)
    i = int(np.argmin(vals))
    best = float(vals[i])
    if 0 < i < len(grid) - 1:
        _, refined = _golden(lambda t: sign * float(traj.air(t)), float(grid[i - 1]), float(grid[i + 1]))
        best = min(best, refined)
    return sign * best


def thermostat_decision(t_air_f: float, mode: int, setpoint_f: float, deadband_f: float) -> int:
    if t_air_f >= setpoint_f + deadband_f / 2.0:
        return ON
    if t_air_f <= setpoint_f - deadband_f / 2.0:
        return OFF
    return mode


@numba.njit(cache=True)
def _expm2_scalar(a00, a01, a10, a11, t):
    # scalar twin of expm2 for the compiled hysteresis loop
    m = 0.5 * (a00 + a11)
    h = 0.5 * (a00 - a11)
    s2 = h * h + a01 * a10
    if s2 > 0.0 and 2.0 * math.sqrt(s2) >= _DEFECTIVE_GAP:
        s = math.sqrt(s2)
        e1 = math.exp((m + s) * t)
        e2 = math.exp((m - s) * t)
        c = 0.5 * (e1 + e2)
        sh = 0.5 * (e1 - e2) / s
    elif s2 < 0.0 and 2.0 * math.sqrt(-s2) >= _DEFECTIVE_GAP:
        w = math.sqrt(-s2)
        em = math.exp(m * t)
        c = em * math.cos(w * t)
        sh = em * math.sin(w * t) / w
    else:
        em = math.exp(m * t)
        tt = t * t
        c = em * (1.0 + s2 * tt / 2.0 + s2 * s2 * tt * tt / 24.0)
        sh = em * t * (1.0 + s2 * tt / 6.0 + s2 * s2 * tt * tt / 120.0)
    return c + sh * h, sh * a01, sh * a10, c - sh * h


@numba.njit(cache=True)
def _air_at(a00, a01, a10, a11, eq0, d0, d1, t):
    e00, e01, _, _ = _expm2_scalar(a00, a01, a10, a11, t)
    return eq0 + e00 * d0 + e01 * d1


@numba.njit(cache=True)
def _first_crossing(a00, a01, a10, a11, eq0, d0, d1, threshold, falling, horizon):
    """Earliest ``t`` in ``(0, horizon]`` where T_air reaches ``threshold``, or -1.

    A grid scan at ``SCAN_STEP_H`` brackets the first crossing, which is then
    bisected to ``SWITCH_TOL_H``; the upper end of the bracket is returned so
    the threshold has been reached at that instant.
    """
    n = max(2, int(math.ceil(horizon / SCAN_STEP_H)))
    step = horizon / n
    prev = 0.0
    for k in range(1, n + 1):
        t = horizon if k == n else k * step
        ta = _air_at(a00, a01, a10, a11, eq0, d0, d1, t)
        if (ta <= threshold) if falling else (ta >= threshold):
            lo, hi = prev, t
            while hi - lo > SWITCH_TOL_H:
                mid = 0.5 * (lo + hi)
                tm = _air_at(a00, a01, a10, a11, eq0, d0, d1, mid)
                if (tm <= threshold) if falling else (tm >= threshold):
                    hi = mid
                else:
                    lo = mid
            return hi
        prev = t
    return -1.0


@numba.njit(cache=True)
def _hysteresis_kernel(a00, a01, a10, a11, eq_on, eq_off, x0, x1, mode, setpoint, deadband, rated, h, n_sub):
    half = deadband / 2.0
    lo_thr, hi_thr = setpoint - half, setpoint + half
    energy = 0.0
    for _ in range(n_sub):
        if x0 >= hi_thr:
            mode = 1
        elif x0 <= lo_thr:
            mode = 0
        remaining = h
        on_time = 0.0
        done = False
        for _ in range(_MAX_SWITCHES):
            eq = eq_on if mode == 1 else eq_off
            d0, d1 = x0 - eq[0], x1 - eq[1]
            if mode == 1:
                t_cross = _first_crossing(a00, a01, a10, a11, eq[0], d0, d1, lo_thr, True, remaining)
            else:
                t_cross = _first_crossing(a00, a01, a10, a11, eq[0], d0, d1, hi_thr, False, remaining)
            t_run = remaining if (t_cross < 0.0 or t_cross >= remaining) else t_cross
            e00, e01, e10, e11 = _expm2_scalar(a00, a01, a10, a11, t_run)
            x0, x1 = eq[0] + e00 * d0 + e01 * d1, eq[1] + e10 * d0 + e11 * d1
            if mode == 1:
                on_time += t_run
            if t_run == remaining:
                done = True
                break
            remaining -= t_run
            mode = 0 if mode == 1 else 1
        if not done:
            return x0, x1, mode, energy, False
        energy += rated * on_time
    return x0, x1, mode, energy, True


def _run_hysteresis(model: HouseModel, state: ThermalState, setpoint_f: float, h: float, n_sub: int):
    if not math.isfinite(setpoint_f):
        raise ValueError("setpoint must be finite")
    a = model.a_matrix
    x0, x1, mode, energy, ok = _hysteresis_kernel(
        a[0, 0], a[0, 1], a[1, 0], a[1, 1], model.equilibrium(ON), model.equilibrium(OFF),
        state.t_air_f, state.t_mass_f, state.mode, setpoint_f, model.deadband_f, model.rated_power_kw, h, n_sub,
    )
    if not ok:  # pragma: no cover - only reachable with a pathological deadband
        raise RuntimeError("compressor switching did not terminate within the sub-step")
    return ThermalState(float(x0), float(x1), int(mode)), float(energy)


def hysteresis_step(
    model: HouseModel, state: ThermalState, setpoint_f: float, dt: float
) -> tuple[ThermalState, float]:
    """Advance one control sub-step under the hysteretic thermostat.

    The compressor mode is decided at the start of the sub-step and again at
    every threshold crossing inside it. Returns the new state and the energy
    drawn (kWh).
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    return _run_hysteresis(model, state, setpoint_f, dt, 1)


def simulate_period(
    model: HouseModel,
    state: ThermalState,
    setpoint_f: float,
    period_h: float,
    substep_h: float = DEFAULT_SUBSTEP_H,
) -> tuple[ThermalState, float]:
    """Run ``hysteresis_step`` over a whole period; returns final state and energy (kWh)."""
    if period_h <= 0.0 or substep_h <= 0.0:
        raise ValueError("period and sub-step must be positive")
    n = max(1, int(round(period_h / substep_h)))
    return _run_hysteresis(model, state, setpoint_f, period_h / n, n)


def average_power_kw(
    model: HouseModel,
    state: ThermalState,
    setpoint_f: float,
    period_h: float,
    substep_h: float = DEFAULT_SUBSTEP_H,
) -> float:
    _, energy = simulate_period(model, state, setpoint_f, period_h, substep_h)
    return energy / period_h

"""Distributed clearing of the generalized dispatch problem.

Every coordinating agent ``i`` holds a local price estimate ``lambda_i`` and a
power ``p_i`` in the generalized sign convention (generation positive, load
consumption negative). One synchronous round is

    lambda_i <- lambda_i - beta_k * sum_{j in N_i}(lambda_i - lambda_j) - alpha_k * (p_i - d_i)
    p_i      <- (dC_i)^{-1}(lambda_i), clamped to the agent's box

and the rounds drive all ``lambda_i`` to the common clearing price while
``sum(p_i) = sum(d_i)``. :func:`centralized_clear` solves the same problem by
bisection on a single shared price and serves as the reference solution.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numba
import numpy as np

from gridcoord.market_curves import AggregateCurve, DemandCurve, SupplyCurve, evaluate_breakpoints

log = logging.getLogger(__name__)

AgentCurve = Union[SupplyCurve, AggregateCurve, DemandCurve]

DEFAULT_TOL_PRICE = 1e-4
DEFAULT_MAX_ITERS = 400000


class GraphError(ValueError):
    """Invalid communication graph."""


class InfeasibleError(ValueError):
    """Requested total power lies outside the agents' combined limits."""


@dataclass(frozen=True)
class CommGraph:
    n_agents: int
    edges: frozenset

    def __post_init__(self):
        norm = set()
        for e in self.edges:
            i, j = (int(v) for v in e)
            if i == j:
                raise GraphError(f"self-loop on agent {i}")
            if not (0 <= i < self.n_agents and 0 <= j < self.n_agents):
                raise GraphError(f"edge ({i}, {j}) references an agent outside 0..{self.n_agents - 1}")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))
        if self.n_agents < 1:
            raise GraphError("graph needs at least one agent")
        comps = self.components()
        if len(comps) > 1:
            isolated = sorted(min(comps[1:], key=len))
            raise GraphError(f"communication graph is disconnected; unreachable component {isolated}")

    def neighbors(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in range(self.n_agents)]
        for i, j in sorted(self.edges):
            nb[i].append(j)
            nb[j].append(i)
        return nb

    def components(self) -> list[list[int]]:
        nb = self.neighbors()
        seen = [False] * self.n_agents
        comps = []
        for start in range(self.n_agents):
            if seen[start]:
                continue
            seen[start] = True
            queue, comp = deque([start]), []
            while queue:
                v = queue.popleft()
                comp.append(v)
                for w in nb[v]:
                    if not seen[w]:
                        seen[w] = True
                        queue.append(w)
            comps.append(comp)
        return comps

    @property
    def max_degree(self) -> int:
        return max((len(n) for n in self.neighbors()), default=0)

    def laplacian(self) -> np.ndarray:
        lap = np.zeros((self.n_agents, self.n_agents))
        for i, j in self.edges:
            lap[i, j] -= 1.0
            lap[j, i] -= 1.0
            lap[i, i] += 1.0
            lap[j, j] += 1.0
        return lap

    @classmethod
    def ring(cls, n: int) -> "CommGraph":
        if n == 1:
            return cls(1, frozenset())
        if n == 2:
            return cls(2, frozenset({(0, 1)}))
        return cls(n, frozenset((i, (i + 1) % n) for i in range(n)))

    @classmethod
    def star(cls, n: int, hub: int = 0) -> "CommGraph":
        return cls(n, frozenset((hub, i) for i in range(n) if i != hub))

    @classmethod
    def complete(cls, n: int) -> "CommGraph":
        return cls(n, frozenset((i, j) for i in range(n) for j in range(i + 1, n)))

    @classmethod
    def from_spec(cls, spec: dict, n_agents: int) -> "CommGraph":
        """Build from ``{"edges": [[i, j], ...]}`` or ``{"topology": "ring"|"star"|"complete"}``."""
        if "edges" in spec:
            return cls(n_agents, frozenset(tuple(e) for e in spec["edges"]))
        topo = spec.get("topology", "ring")
        builders = {"ring": cls.ring, "star": cls.star, "complete": cls.complete}
        if topo not in builders:
            raise GraphError(f"unknown topology {topo!r}; expected one of {sorted(builders)}")
        return builders[topo](n_agents)


@dataclass(frozen=True)
class GainSchedule:
    """Step sizes for the innovation (``alpha``) and consensus (``beta``) terms.

    ``beta_k = beta0`` and ``alpha_k = alpha0 * ((plateau + 1) / (max(k, plateau) + 1))**decay_tau``,
    so ``plateau=0`` gives ``alpha0/(k+1)**decay_tau``. The innovation gain
    has to vanish relative to the consensus gain for the local prices to
    agree exactly. With a constant ratio they settle at a disagreement
    proportional to ``alpha/beta * |p_i - d_i|``.
    """

    alpha0: float = 5e-4
    beta0: float = 0.05
    decay_tau: float = 0.0
    plateau: int = 0

    def __post_init__(self):
        if not (self.alpha0 > 0.0 and self.beta0 > 0.0):
            raise ValueError("gains alpha0 and beta0 must be positive")
        if not 0.0 <= self.decay_tau <= 1.0:
            raise ValueError("decay_tau must lie in [0, 1]")
        if self.plateau < 0:
            raise ValueError("plateau must be non-negative")

    def alpha(self, k: int) -> float:
        return self.alpha0 * ((self.plateau + 1.0) / (max(k, self.plateau) + 1.0)) ** self.decay_tau

    def beta(self, k: int) -> float:
        return self.beta0

    def check(self, graph: CommGraph) -> None:
        if self.beta0 * graph.max_degree >= 1.0:
            raise ValueError(
                f"beta0={self.beta0} too large for max degree {graph.max_degree}; need beta0 * degree < 1"
            )

    @classmethod
    def tuned(cls, graph: CommGraph, curves: Sequence[AgentCurve], settle: float = 4.0) -> "GainSchedule":
        """Gains scaled to the graph degree and to the agents' price sensitivities.

        ``alpha0`` keeps the innovation step of the most price-sensitive agent
        below half its local stability limit. The plateau lasts until the mean
        price error has contracted by about ``e**-settle``; the ``1/k`` decay
        after it keeps that contraction rate relative to the shrinking gain.
        """
        beta0 = 1.0 / (graph.max_degree + 1.0)
        slopes = np.array([price_sensitivity(c) for c in curves])
        g_max = float(slopes.max())
        if g_max <= 0.0:
            return cls(1e-4, beta0)
        alpha0 = 0.5 / g_max
        rate = alpha0 * float(slopes.mean())
        plateau = int(min(math.ceil(settle / rate), 5000))
        return cls(alpha0, beta0, 1.0, plateau)


def price_sensitivity(curve: AgentCurve) -> float:
    """Typical |dp/dlambda| (kW per $/kWh) of one agent over its active price range."""
    if isinstance(curve, SupplyCurve):
        return 1.0 / (2.0 * curve.a)
    prices, powers = curve.breakpoints()
    width = float(prices[-1] - prices[0])
    depth = float(powers[0] - powers[-1])
    if depth <= 0.0:
        return 0.0
    return depth / max(width, 1e-6)


@dataclass(frozen=True)
class AgentState:
    lambda_i: float
    p_i: float
    d_i: float
    curve: AgentCurve


@dataclass(frozen=True)
class ClearingResult:
    lambda_star: float
    powers: tuple
    iterations: int
    price_spread: float
    balance_mismatch_kw: float
    converged: bool
    lambdas: tuple = ()
    method: str = "distributed"


def is_load(curve: AgentCurve) -> bool:
    return not isinstance(curve, SupplyCurve)


def signed_limits(curve: AgentCurve) -> tuple[float, float]:
    """Box limits in the generalized convention (loads negative)."""
    if is_load(curve):
        return -curve.p_max_kw, -curve.p_min_kw
    return curve.p_min_kw, curve.p_max_kw


def agent_power(curve: AgentCurve, price: float) -> float:
    """Inverse marginal cost of one agent: generator output or negated load demand."""
    if isinstance(curve, SupplyCurve):
        return float(np.clip((price - curve.b) / (2.0 * curve.a), curve.p_min_kw, curve.p_max_kw))
    return -float(curve.evaluate(price))


def to_generalized(consumption_kw: float) -> float:
    return -consumption_kw


def from_generalized(p_kw: float) -> float:
    return -p_kw


class _Batch:
    """Vectorised view of a set of agent curves for fast repeated inversion."""

    def __init__(self, curves: Sequence[AgentCurve]):
        self.n = len(curves)
        self.gen_idx = np.array([i for i, c in enumerate(curves) if not is_load(c)], dtype=int)
        gens = [curves[i] for i in self.gen_idx]
        self.ga = np.array([g.a for g in gens])
        self.gb = np.array([g.b for g in gens])
        self.glo = np.array([g.p_min_kw for g in gens])
        self.ghi = np.array([g.p_max_kw for g in gens])
        self.load_idx = np.array([i for i, c in enumerate(curves) if is_load(c)], dtype=int)
        bps = [curves[i].breakpoints() for i in self.load_idx]
        width = max([2] + [len(pr) for pr, _ in bps])
        # pad every curve to a common length by repeating its last point
        self.lp = np.array([np.pad(pr, (0, width - len(pr)), mode="edge") for pr, _ in bps]).reshape(-1, width)
        self.lw = np.array([np.pad(pw, (0, width - len(pw)), mode="edge") for _, pw in bps]).reshape(-1, width)
        self.rows = np.arange(len(self.load_idx))
        lims = [signed_limits(c) for c in curves]
        self.lo = np.array([lo for lo, _ in lims])
        self.hi = np.array([hi for _, hi in lims])

    def _load_demand(self, x: np.ndarray) -> np.ndarray:
        # right-continuous piecewise-linear lookup: at an exact step price the
        # post-step value is taken; the iteration never rests on a step
        width = self.lp.shape[1]
        idx = (self.lp <= x[:, None]).sum(axis=1)
        j = np.clip(idx, 1, width - 1)
        x0, x1 = self.lp[self.rows, j - 1], self.lp[self.rows, j]
        y0, y1 = self.lw[self.rows, j - 1], self.lw[self.rows, j]
        dx = x1 - x0
        t = np.divide(x - x0, dx, out=np.ones_like(x), where=dx > 0.0)
        y = y0 + np.clip(t, 0.0, 1.0) * (y1 - y0)
        y = np.where(idx == 0, self.lw[:, 0], y)
        return np.where(idx >= width, self.lw[:, -1], y)

    def powers(self, lam: np.ndarray) -> np.ndarray:
        p = np.empty(self.n)
        if len(self.gen_idx):
            p[self.gen_idx] = np.clip((lam[self.gen_idx] - self.gb) / (2.0 * self.ga), self.glo, self.ghi)
        if len(self.load_idx):
            p[self.load_idx] = -self._load_demand(lam[self.load_idx])
        return p

    def total(self, price: float) -> float:
        return float(self.powers(np.full(self.n, price)).sum())

    def price_bracket(self) -> tuple[float, float]:
        knees = []
        if len(self.gen_idx):
            knees += list(self.gb + 2.0 * self.ga * self.glo) + list(self.gb + 2.0 * self.ga * self.ghi)
        if len(self.load_idx):
            knees += list(self.lp[:, 0]) + list(self.lp[:, -1])
        lo, hi = min(knees), max(knees)
        pad = max(1.0, hi - lo)
        return lo - pad, hi + pad


def iterate_once(states: Sequence[AgentState], graph: CommGraph, alpha: float, beta: float) -> list[AgentState]:
    """One synchronous consensus + innovation round; every agent reads round-k values only."""
    nb = graph.neighbors()
    lam = [s.lambda_i for s in states]
    out = []
    for i, s in enumerate(states):
        consensus = sum(lam[i] - lam[j] for j in nb[i])
        new_lam = lam[i] - beta * consensus - alpha * (s.p_i - s.d_i)
        out.append(replace(s, lambda_i=new_lam, p_i=agent_power(s.curve, new_lam)))
    return out


def initial_states(curves: Sequence[AgentCurve], d_split: Sequence[float], price: float) -> list[AgentState]:
    return [AgentState(price, agent_power(c, price), float(d), c) for c, d in zip(curves, d_split)]


def warm_states(
    curves: Sequence[AgentCurve], d_split: Sequence[float], previous: ClearingResult
) -> list[AgentState]:
    """Start each agent at the previous period's converged local price."""
    return [
        AgentState(float(lam), agent_power(c, float(lam)), float(d), c)
        for c, d, lam in zip(curves, d_split, previous.lambdas)
    ]


def _residuals(lam: np.ndarray, p: np.ndarray, demand: float) -> tuple[float, float]:
    return float(lam.max() - lam.min()), float(abs(p.sum() - demand))


def balance_tolerance(demand_kw: float, rel: float = 1e-3, floor_kw: float = 0.1) -> float:
    return max(rel * abs(demand_kw), floor_kw)


@numba.njit(cache=True)
def _powers_kernel(lam, gen, ga, gb, lo, hi, offs, bp_price, bp_power, out):
    for i in range(lam.shape[0]):
        x = lam[i]
        if gen[i]:
            v = (x - gb[i]) / (2.0 * ga[i])
            out[i] = min(max(v, lo[i]), hi[i])
            continue
        s, e = offs[i], offs[i + 1]
        j = s + np.searchsorted(bp_price[s:e], x, side="right")
        if j == s:
            y = bp_power[s]
        elif j == e:
            y = bp_power[e - 1]
        else:
            x0, x1 = bp_price[j - 1], bp_price[j]
            y = bp_power[j - 1] + (x - x0) / (x1 - x0) * (bp_power[j] - bp_power[j - 1])
        out[i] = -y


@numba.njit(cache=True)
def _clearing_kernel(
    lam, p, d, indptr, indices, alpha0, beta0, decay_tau, plateau,
    gen, ga, gb, lo, hi, offs, bp_price, bp_power, tol_price, tol_balance, max_iters,
):
    n = lam.shape[0]
    demand = d.sum()
    nxt = np.empty(n)
    k = 0
    while k < max_iters:
        if lam.max() - lam.min() <= tol_price and abs(p.sum() - demand) <= tol_balance:
            break
        alpha = alpha0 * ((plateau + 1.0) / (max(k, plateau) + 1.0)) ** decay_tau
        for i in range(n):
            consensus = 0.0
            for q in range(indptr[i], indptr[i + 1]):
                consensus += lam[i] - lam[indices[q]]
            nxt[i] = lam[i] - beta0 * consensus - alpha * (p[i] - d[i])
        lam[:] = nxt
        _powers_kernel(lam, gen, ga, gb, lo, hi, offs, bp_price, bp_power, p)
        k += 1
    return k


def _packed(curves: Sequence[AgentCurve]):
    """Flat arrays describing every agent's inverse marginal cost for the compiled kernels."""
    n = len(curves)
    gen = np.array([not is_load(c) for c in curves])
    ga, gb, lo, hi = (np.ones(n), np.zeros(n), np.zeros(n), np.zeros(n))
    offs = np.zeros(n + 1, dtype=np.int64)
    prices, powers = [], []
    for i, c in enumerate(curves):
        if isinstance(c, SupplyCurve):
            ga[i], gb[i], lo[i], hi[i] = c.a, c.b, c.p_min_kw, c.p_max_kw
            offs[i + 1] = offs[i]
        else:
            pr, pw = c.breakpoints()
            prices.append(np.asarray(pr, dtype=float))
            powers.append(np.asarray(pw, dtype=float))
            offs[i + 1] = offs[i] + len(pr)
    bp_price = np.concatenate(prices) if prices else np.zeros(0)
    bp_power = np.concatenate(powers) if powers else np.zeros(0)
    return gen, ga, gb, lo, hi, offs, bp_price, bp_power


def run_clearing(
    states: Sequence[AgentState],
    graph: CommGraph,
    gains: GainSchedule,
    tol_price: float = DEFAULT_TOL_PRICE,
    tol_balance_kw: float | None = None,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> ClearingResult:
    """Iterate the distributed update until prices agree and power balances.

    Convergence is checked before the first round, so a warm start that
    already satisfies both tolerances returns after zero iterations. The
    price criterion is the largest disagreement between any two agents, which
    bounds every edge disagreement. The rounds run in a compiled kernel; it
    performs exactly the update of :func:`iterate_once`.
    """
    if graph.n_agents != len(states):
        raise GraphError(f"graph has {graph.n_agents} agents but {len(states)} states were given")
    gains.check(graph)
    nb = graph.neighbors()
    indptr = np.cumsum([0] + [len(x) for x in nb]).astype(np.int64)
    indices = np.array([j for x in nb for j in x], dtype=np.int64)
    d = np.array([s.d_i for s in states], dtype=float)
    demand = float(d.sum())
    if tol_balance_kw is None:
        tol_balance_kw = balance_tolerance(demand)
    lam = np.array([s.lambda_i for s in states], dtype=float)
    p = np.array([s.p_i for s in states], dtype=float)
    k = _clearing_kernel(
        lam, p, d, indptr, indices, gains.alpha0, gains.beta0, gains.decay_tau, float(gains.plateau),
        *_packed([s.curve for s in states]), tol_price, tol_balance_kw, max_iters,
    )
    spread, mismatch = _residuals(lam, p, demand)
    converged = spread <= tol_price and mismatch <= tol_balance_kw
    if not converged:
        log.debug("distributed clearing stopped after %d rounds: spread=%.3g mismatch=%.3g kW", k, spread, mismatch)
    return ClearingResult(
        lambda_star=float(lam.mean()),
        powers=tuple(float(v) for v in p),
        iterations=int(k),
        price_spread=spread,
        balance_mismatch_kw=mismatch,
        converged=converged,
        lambdas=tuple(float(v) for v in lam),
    )


def centralized_clear(curves: Sequence[AgentCurve], demand_kw: float, tol_kw: float = 1e-9) -> ClearingResult:
    """Reference solution: bisection on one shared price until total power equals ``demand_kw``.

    When the demand falls on a vertical step of the aggregate response the
    final bracket ``[lo, hi]`` (adjacent floats) is interpolated so that the
    agents on the step share the remainder exactly.
    """
    batch = _Batch(curves)
    p_floor, p_ceil = float(batch.lo.sum()), float(batch.hi.sum())
    if demand_kw < p_floor - tol_kw:
        raise InfeasibleError(f"demand {demand_kw:.6g} kW below the combined lower limit {p_floor:.6g} kW")
    if demand_kw > p_ceil + tol_kw:
        raise InfeasibleError(f"demand {demand_kw:.6g} kW above the combined upper limit {p_ceil:.6g} kW")
    lo, hi = batch.price_bracket()
    iters = 0
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if batch.total(mid) < demand_kw:
            lo = mid
        else:
            hi = mid
        iters += 1
    p_lo = batch.powers(np.full(batch.n, lo))
    p_hi = batch.powers(np.full(batch.n, hi))
    t_lo, t_hi = float(p_lo.sum()), float(p_hi.sum())
    if t_hi - t_lo > 0.0:
        theta = min(max((demand_kw - t_lo) / (t_hi - t_lo), 0.0), 1.0)
    else:
        theta = 1.0
    p = p_lo + theta * (p_hi - p_lo)
    lam_star = hi if theta > 0.0 else lo
    mismatch = abs(math.fsum(p) - demand_kw)
    return ClearingResult(
        lambda_star=float(lam_star),
        powers=tuple(float(v) for v in p),
        iterations=iters,
        price_spread=0.0,
        balance_mismatch_kw=mismatch,
        converged=mismatch <= max(tol_kw, 1e-9 * abs(demand_kw)),
        lambdas=tuple(float(lam_star) for _ in range(batch.n)),
        method="centralized",
    )

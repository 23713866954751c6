import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_market
from gridcoord.coordination import (
    AgentState,
    CommGraph,
    GainSchedule,
    GraphError,
    InfeasibleError,
    agent_power,
    balance_tolerance,
    centralized_clear,
    from_generalized,
    initial_states,
    iterate_once,
    run_clearing,
    signed_limits,
    to_generalized,
    warm_states,
)
from gridcoord.market_curves import DemandCurve, SupplyCurve, aggregate


class TestCommGraph:
    def test_disconnected_names_component(self):
        with pytest.raises(GraphError, match=r"\[3, 4\]"):
            CommGraph(5, frozenset({(0, 1), (1, 2), (3, 4)}))

    def test_self_loop(self):
        with pytest.raises(GraphError, match="self-loop"):
            CommGraph(2, frozenset({(0, 1), (1, 1)}))

    def test_out_of_range(self):
        with pytest.raises(GraphError):
            CommGraph(2, frozenset({(0, 2)}))

    def test_edges_undirected(self):
        g = CommGraph(3, frozenset({(1, 0), (0, 1), (2, 1)}))
        assert g.edges == frozenset({(0, 1), (1, 2)})

    @pytest.mark.parametrize("topology,degree", [("ring", 2), ("star", 5), ("complete", 5)])
    def test_named_topologies(self, topology, degree):
        g = CommGraph.from_spec({"topology": topology}, 6)
        assert g.max_degree == degree

    def test_unknown_topology(self):
        with pytest.raises(GraphError, match="unknown topology"):
            CommGraph.from_spec({"topology": "mesh"}, 4)

    def test_laplacian_rows_sum_to_zero(self):
        lap = CommGraph.ring(5).laplacian()
        np.testing.assert_array_equal(lap.sum(axis=1), 0.0)


class TestGains:
    def test_default_constant(self):
        g = GainSchedule()
        assert g.alpha(0) == g.alpha(1000) == 5e-4
        assert g.beta(7) == 0.05

    def test_harmonic_decay(self):
        g = GainSchedule(1.0, 0.1, decay_tau=1.0)
        assert g.alpha(3) == pytest.approx(0.25)

    def test_plateau(self):
        g = GainSchedule(1.0, 0.1, decay_tau=1.0, plateau=9)
        assert g.alpha(0) == g.alpha(9) == 1.0
        assert g.alpha(19) == pytest.approx(0.5)

    def test_degree_bound(self):
        with pytest.raises(ValueError, match="degree"):
            GainSchedule(beta0=0.5).check(CommGraph.complete(4))

    @pytest.mark.parametrize("kwargs", [{"alpha0": 0.0}, {"beta0": -1.0}, {"decay_tau": 1.5}, {"plateau": -1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            GainSchedule(**kwargs)

    def test_tuned_respects_degree(self, dgs):
        g = CommGraph.star(5)
        gains = GainSchedule.tuned(g, dgs)
        gains.check(g)
        assert gains.beta0 * g.max_degree < 1.0


class TestSigns:
    @given(st.floats(0, 1e4))
    def test_round_trip(self, kw):
        assert from_generalized(to_generalized(kw)) == kw

    def test_load_power_negative(self):
        c = DemandCurve(3.0, 1.0, 0.04, 0.06)
        assert agent_power(c, 0.0) == -3.0
        assert signed_limits(c) == (-3.0, -1.0)


class TestIterateOnce:
    def _gens(self):
        return [SupplyCurve(1e-3, 0.02, 0.0, 0.0, 1e3) for _ in range(2)]

    def test_fixed_point(self):
        curves = self._gens()
        lam = 0.05
        states = [AgentState(lam, agent_power(c, lam), agent_power(c, lam), c) for c in curves]
        out = iterate_once(states, CommGraph.ring(2), 0.1, 0.1)
        assert [s.lambda_i for s in out] == [lam, lam]
        assert [s.p_i for s in out] == [s.p_i for s in states]

    def test_pure_consensus(self):
        curves = self._gens()
        states = [AgentState(1.0, 5.0, 5.0, curves[0]), AgentState(0.0, 5.0, 5.0, curves[1])]
        out = iterate_once(states, CommGraph.ring(2), 0.0, 0.1)
        assert [s.lambda_i for s in out] == pytest.approx([0.9, 0.1])

    def test_sum_identity(self):
        rng = np.random.default_rng(2)
        graph, curves, _, d = random_market(rng, 12)
        states = [AgentState(float(rng.uniform(0.05, 0.1)), 0.0, float(di), c) for c, di in zip(curves, d)]
        states = [AgentState(s.lambda_i, agent_power(s.curve, s.lambda_i), s.d_i, s.curve) for s in states]
        alpha = 1e-4
        out = iterate_once(states, graph, alpha, 0.05)
        lhs = math.fsum(s.lambda_i for s in out) - math.fsum(s.lambda_i for s in states)
        rhs = -alpha * math.fsum(s.p_i - s.d_i for s in states)
        assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_consensus_conserves_sum(self):
        rng = np.random.default_rng(4)
        graph, curves, _, d = random_market(rng, 9)
        states = initial_states(curves, d, 0.07)
        states = [AgentState(float(rng.uniform(0, 1)), s.p_i, s.d_i, s.curve) for s in states]
        out = iterate_once(states, graph, 0.0, 0.05)
        assert math.fsum(s.lambda_i for s in out) == pytest.approx(math.fsum(s.lambda_i for s in states), abs=1e-12)

    def test_power_within_box(self):
        rng = np.random.default_rng(8)
        graph, curves, _, d = random_market(rng, 10)
        states = initial_states(curves, d, 0.0)
        for _ in range(5):
            states = iterate_once(states, graph, 1e-3, 0.05)
            for s in states:
                lo, hi = signed_limits(s.curve)
                assert lo <= s.p_i <= hi


class TestRunClearing:
    def test_single_agent(self):
        g = SupplyCurve(2e-4, 0.02, 0.0, 0.0, 500.0)
        r = run_clearing(initial_states([g], [200.0], 0.05), CommGraph.ring(1), GainSchedule(1e-4, 0.5), 1e-9, 1e-6)
        assert r.converged
        assert r.lambda_star == pytest.approx(2 * 2e-4 * 200.0 + 0.02, abs=1e-7)

    def test_two_generators(self, dgs):
        curves = dgs[:2]
        graph = CommGraph.ring(2)
        # DG2 moves ~960 kW per $/kWh, so 0.1 kW accuracy needs a price spread well below 1e-4
        r = run_clearing(initial_states(curves, [150.0, 150.0], 0.08), graph, GainSchedule.tuned(graph, curves),
                         tol_price=1e-6, tol_balance_kw=1e-3)
        assert r.converged
        assert r.lambda_star == pytest.approx(0.09398, abs=1e-4)
        assert r.powers == pytest.approx((224.3, 75.7), abs=0.1)

    def test_warm_start_converges_immediately(self):
        rng = np.random.default_rng(6)
        graph, curves, _, d = random_market(rng, 15)
        gains = GainSchedule.tuned(graph, curves)
        first = run_clearing(initial_states(curves, d, 0.08), graph, gains)
        assert first.converged
        again = run_clearing(warm_states(curves, d, first), graph, gains)
        assert again.converged
        assert again.iterations <= 2

    def test_not_converged_is_flagged(self):
        rng = np.random.default_rng(6)
        graph, curves, _, d = random_market(rng, 15)
        r = run_clearing(initial_states(curves, d, 0.5), graph, GainSchedule.tuned(graph, curves), max_iters=3)
        assert not r.converged
        assert r.iterations == 3

    def test_split_invariance(self):
        rng = np.random.default_rng(9)
        graph, curves, demand, d1 = random_market(rng, 8)
        d2 = demand * rng.dirichlet(np.ones(8))
        gains = GainSchedule.tuned(graph, curves)
        a = run_clearing(initial_states(curves, d1, 0.08), graph, gains)
        b = run_clearing(initial_states(curves, d2, 0.08), graph, gains)
        assert a.lambda_star == pytest.approx(b.lambda_star, abs=2e-4)

    def test_graph_size_mismatch(self, dgs):
        with pytest.raises(GraphError):
            run_clearing(initial_states(dgs, [0.0] * 5, 0.08), CommGraph.ring(4), GainSchedule())

    def test_balance_tolerance(self):
        assert balance_tolerance(1000.0) == 1.0
        assert balance_tolerance(5.0) == 0.1


class TestCentralized:
    def test_two_generators_kkt(self, dgs):
        r = centralized_clear(dgs[:2], 300.0)
        # equal marginal cost: 2 a1 p1 + b1 = 2 a2 (300 - p1) + b2
        a1, b1, a2, b2 = dgs[0].a, dgs[0].b, dgs[1].a, dgs[1].b
        p1 = (2 * a2 * 300.0 + b2 - b1) / (2 * a1 + 2 * a2)
        assert r.powers == pytest.approx((p1, 300.0 - p1), abs=1e-6)
        assert r.lambda_star == pytest.approx(2 * a1 * p1 + b1, abs=1e-9)

    def test_boundary(self, dgs):
        g = dgs[0]
        r = centralized_clear([g], g.p_max_kw)
        assert r.powers[0] == pytest.approx(g.p_max_kw)
        assert r.lambda_star == pytest.approx(float(g.marginal_cost(g.p_max_kw)), abs=1e-9)

    def test_dg2_saturates(self, dgs):
        r = centralized_clear(dgs, 900.0)
        assert r.powers[1] == pytest.approx(100.0)
        interior = [i for i, (g, p) in enumerate(zip(dgs, r.powers)) if g.p_min_kw < p < g.p_max_kw]
        mcs = [float(dgs[i].marginal_cost(r.powers[i])) for i in interior]
        assert max(mcs) - min(mcs) <= 1e-9

    def test_infeasible_names_bound(self, dgs):
        with pytest.raises(InfeasibleError, match="upper"):
            centralized_clear(dgs, 1e5)
        with pytest.raises(InfeasibleError, match="lower"):
            centralized_clear(dgs, 0.0)

    def test_random_kkt(self):
        rng = np.random.default_rng(3)
        curves = [SupplyCurve(rng.uniform(1e-4, 1e-3), rng.uniform(0.01, 0.03), 0.0, 10.0, 300.0) for _ in range(3)]
        for demand in rng.uniform(30.0, 900.0, 1000):
            r = centralized_clear(curves, float(demand))
            assert abs(math.fsum(r.powers) - demand) <= 1e-6
            mcs = [float(c.marginal_cost(p)) for c, p in zip(curves, r.powers) if c.p_min_kw < p < c.p_max_kw]
            if mcs:
                assert max(mcs) - min(mcs) <= 1e-6

    def test_monotone_in_demand(self, dgs):
        loads = [aggregate([DemandCurve(50.0, 10.0, 0.05, 0.09, ((0.07, 30.0),))])]
        prices = [centralized_clear(dgs + loads, float(D)).lambda_star for D in np.linspace(200, 1300, 60)]
        assert np.all(np.diff(prices) >= 0)

    def test_step_load_shared(self):
        # generator marginal cost reaches 0.05 at 25 kW; two 15 kW steps at 0.05 absorb it evenly
        loads = [aggregate([DemandCurve(15.0, 0.0, 0.05, 0.05)]) for _ in range(2)]
        g = SupplyCurve(1e-3, 0.0, 0.0, 0.0, 100.0)
        r = centralized_clear([g] + loads, 0.0)
        assert r.lambda_star == pytest.approx(0.05, abs=1e-12)
        assert r.powers == pytest.approx((25.0, -12.5, -12.5), abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_distributed_matches_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    graph, curves, demand, d = random_market(rng, int(rng.integers(5, 20)))
    r = run_clearing(initial_states(curves, d, 0.08), graph, GainSchedule.tuned(graph, curves))
    ref = centralized_clear(curves, demand)
    assert r.converged
    assert abs(r.lambda_star - ref.lambda_star) <= 1e-3

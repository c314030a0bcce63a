import math

import numpy as np
import pandas as pd
import pytest

import ris_flow.flowsim as flowsim
from ris_flow.channel import ChannelStats
from ris_flow.errors import DomainError, InvalidModelError
from ris_flow.flowsim import (
    FlowState,
    Policy,
    build_policy,
    default_rays,
    estimate_region,
    first_unstable_scale,
    moving_average,
    run,
    service_rates,
    stability_metric,
    sweep_policies,
    trend_test,
)
from ris_flow.phase_opt import PhaseOptions
from ris_flow.sinr import rate, sinr_vector
from tests.conftest import identity_stats, toy_scenario

# eta = 4 with unit gains, unit power and unit noise gives SINR 0.8 when alone
SOLO_BITS = 1e3 * np.log2(1.8)


def single_queue(mu: float, lam: float):
    """One location served at exactly ``mu`` flows per slot whenever it is occupied."""
    stats = identity_stats([1.0], [1.0])
    scenario = toy_scenario([lam], [SOLO_BITS / mu])
    return scenario, stats, Policy(kind='optimized', eta=4.0)


def two_locations(arrival_rates=(0.5, 0.5)):
    stats = identity_stats([1.0, 0.5], np.ones(16))
    scenario = toy_scenario(list(arrival_rates), noise_power=0.01)
    return scenario, stats


class TestPolicy:
    def test_fixed_policies_need_eta(self):
        with pytest.raises(InvalidModelError):
            Policy(kind='optimized')

    def test_unknown_kind(self):
        with pytest.raises(InvalidModelError):
            Policy(kind='greedy', eta=1.0)

    def test_random_peak_eta_is_spectral(self):
        assert Policy(kind='random').peak_eta(identity_stats([1.0], [1.0], M=4)) == pytest.approx(4.0)


class TestServiceRates:
    def test_empty_locations_get_nothing(self):
        scenario, stats = two_locations()
        state = FlowState.empty(2)
        rates = service_rates(Policy('optimized', eta=4.0), np.array([2, 0]), state, scenario, stats,
                              np.random.default_rng(0))
        alone = sinr_vector(stats, 4.0, [1.0, 0.0], scenario.powers, scenario.noise_power)[0]
        assert rates[1] == 0.0
        assert rates[0] == pytest.approx(rate(alone, 1e6, 1e-3))

    def test_all_active_transmit_adds_interference(self):
        scenario, stats = two_locations()
        counts = np.array([3, 1])
        rng = np.random.default_rng(0)
        occupancy = service_rates(Policy('optimized', eta=4.0), counts, FlowState.empty(2), scenario, stats, rng)
        crowded = service_rates(Policy('optimized', eta=4.0, all_active_transmit=True), counts, FlowState.empty(2),
                                scenario, stats, rng)
        assert crowded[0] < occupancy[0]
        assert crowded[1] < occupancy[1]

    def test_tdma_round_robin(self):
        scenario, stats = two_locations()
        policy = Policy('tdma', eta=4.0)
        state = FlowState.empty(2)
        rng = np.random.default_rng(0)
        served = [int(np.argmax(service_rates(policy, np.array([1, 1]), state, scenario, stats, rng)))
                  for _ in range(4)]
        assert served == [0, 1, 0, 1]
        rates = service_rates(policy, np.array([0, 4]), state, scenario, stats, rng)
        assert rates[0] == 0.0 and rates[1] > 0.0

    def test_tdma_serves_at_interference_free_rate(self):
        scenario, stats = two_locations()
        rates = service_rates(Policy('tdma', eta=4.0), np.array([1, 1]), FlowState.empty(2), scenario, stats,
                              np.random.default_rng(0))
        alone = sinr_vector(stats, 4.0, [1.0, 0.0], scenario.powers, scenario.noise_power)[0]
        assert rates[0] == pytest.approx(rate(alone, 1e6, 1e-3))


class TestRun:
    def test_empty_traffic_stays_empty(self):
        scenario, stats = two_locations((0.0, 0.0))
        trace = run(scenario, Policy('optimized', eta=4.0), 50, stats, seed=1)
        assert trace.X.sum() == 0
        assert stability_metric(trace) == 0.0

    def test_flow_conservation(self):
        scenario, stats = two_locations((0.8, 0.6))
        trace = run(scenario, Policy('optimized', eta=4.0), 400, stats, seed=2)
        np.testing.assert_array_equal(trace.X[-1], trace.arrivals[-1] - trace.departures[-1])
        assert trace.X.min() >= 0

    def test_same_seed_same_trace(self):
        scenario, stats = two_locations((0.8, 0.6))
        first = run(scenario, Policy('random'), 300, stats, seed=3)
        second = run(scenario, Policy('random'), 300, stats, seed=3)
        np.testing.assert_array_equal(first.X, second.X)
        assert first.scenario_hash == second.scenario_hash

    def test_record_every_keeps_last_slot(self):
        scenario, stats = two_locations()
        trace = run(scenario, Policy('optimized', eta=4.0), 25, stats, seed=0, record_every=10)
        assert trace.slots.tolist() == [0, 10, 20, 25]
        assert list(trace.to_frame().columns) == ['slot', 'X_1', 'X_2', 'sum']

    def test_initial_flows(self):
        scenario, stats = two_locations((0.0, 0.0))
        trace = run(scenario, Policy('optimized', eta=4.0), 1, stats, seed=0, initial=[5, 2])
        assert trace.X[0].tolist() == [5, 2]

    def test_horizon_must_be_positive(self):
        scenario, stats = two_locations()
        with pytest.raises(DomainError):
            run(scenario, Policy('optimized', eta=4.0), 0, stats, seed=0)

    def test_single_queue_mean_occupancy(self):
        # M/M/1 at load 1/2: mean number in system is 1
        scenario, stats, policy = single_queue(mu=2.0, lam=1.0)
        trace = run(scenario, policy, 100000, stats, seed=11, record_every=1)
        assert stability_metric(trace) == pytest.approx(1.0, rel=0.05)

    def test_overload_grows_linearly(self):
        scenario, stats, policy = single_queue(mu=1.0, lam=1.5)
        trace = run(scenario, policy, 4000, stats, seed=4)
        assert trace.X[-1, 0] / 4000 == pytest.approx(0.5, rel=0.15)


class TestStatistics:
    def trace(self):
        scenario, stats = two_locations((0.5, 0.5))
        return run(scenario, Policy('optimized', eta=4.0), 200, stats, seed=5)

    def test_stability_metric_range(self):
        trace = self.trace()
        assert stability_metric(trace, 100) >= 0
        with pytest.raises(DomainError):
            stability_metric(trace, 0)
        with pytest.raises(DomainError):
            stability_metric(trace, 201)

    def test_moving_average_long_window_collapses(self):
        trace = self.trace()
        averaged = moving_average(trace, 1000)
        assert len(averaged) == 1
        assert averaged['sum'].iloc[0] == pytest.approx(trace.X.sum(axis=1).mean())

    def test_moving_average_unit_window_is_identity(self):
        trace = self.trace()
        np.testing.assert_allclose(moving_average(trace, 1)['sum'].to_numpy(), trace.X.sum(axis=1))

    def test_trend_detects_growth(self):
        x = np.arange(400, dtype=float)
        noise = np.random.default_rng(0).normal(0.0, 0.5, 400)
        assert trend_test(pd.Series(0.05 * x + noise, index=x), fraction=0.5, threshold=5e-3).diverging
        assert not trend_test(pd.Series(3.0 + noise, index=x), fraction=0.5, threshold=5e-3).diverging

    def test_large_backlog_that_drains_is_not_diverging(self):
        scenario, stats, policy = single_queue(mu=2.0, lam=0.5)
        trace = run(scenario, policy, 2000, stats, seed=9, initial=[200])
        assert stability_metric(trace) > 1.0
        assert not trend_test(moving_average(trace, 250)['sum'], fraction=0.5, threshold=1e-3).diverging

    def test_flat_series(self):
        result = trend_test(np.full(10, 2.0))
        assert result.slope == 0.0 and not result.diverging

    def test_trend_arguments(self):
        with pytest.raises(DomainError):
            trend_test(np.arange(10.0), fraction=0.0)
        with pytest.raises(DomainError):
            trend_test(np.arange(4.0), fraction=0.5)


class TestRegion:
    def test_default_rays(self):
        rays = default_rays(2)
        assert rays[0] == [1.0, 0.0] and rays[-1] == [0.0, 1.0]
        assert len(rays) == 5
        assert default_rays(3) == [[1.0, 1.0, 1.0]]

    def test_invalid_rays(self):
        scenario, stats = two_locations()
        policy = Policy('optimized', eta=4.0)
        for ray in ([1.0, -0.5], [1.0], [0.0, 0.0]):
            with pytest.raises(DomainError):
                estimate_region(scenario, stats, policy, [ray], horizon=10, threshold=1e-3, seed=0)
        with pytest.raises(DomainError):
            estimate_region(scenario, stats, policy, [[1.0, 1.0]], horizon=10, threshold=0.0, seed=0)

    def test_no_rays(self):
        scenario, stats = two_locations()
        assert estimate_region(scenario, stats, Policy('optimized', eta=4.0), [], horizon=10, threshold=1e-3,
                               seed=0) == []

    def test_single_queue_boundary_near_service_rate(self):
        scenario, stats, policy = single_queue(mu=2.0, lam=0.0)
        [point] = estimate_region(scenario, stats, policy, [[1.0]], horizon=8000, threshold=5e-3, seed=21,
                                  window=500, tol=0.05)
        assert point.bracketed
        assert 1.4 <= point.scale <= 2.4

    def test_concurrent_service_contains_time_sharing(self):
        scenario, stats = two_locations()
        rays = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
        kwargs = dict(horizon=4000, threshold=1e-2, seed=8, window=250, tol=0.02)
        concurrent = estimate_region(scenario, stats, Policy('optimized', eta=4.0), rays, **kwargs)
        shared = estimate_region(scenario, stats, Policy('tdma', eta=4.0), rays, **kwargs)

        # A lone location is served identically under both policies
        assert concurrent[0].scale == shared[0].scale
        assert concurrent[1].scale == shared[1].scale
        assert concurrent[2].scale > shared[2].scale
        assert concurrent[2].arrival_rates[0] == pytest.approx(concurrent[2].scale / np.sqrt(2))


def rank_one_link():
    """One location behind a fully correlated 4-element RIS: equal phases give eta = 16, random ones 4 on average."""
    ones = np.ones((4, 4), dtype=complex)
    stats = ChannelStats(alpha_user=np.ones(1), alpha_ap=np.ones(1), R_t=ones, R_r=ones.copy(), R=ones.copy())
    # one flow per slot at eta = 16 and noise 100
    scenario = toy_scenario([0.0], [1e3 * np.log2(1.0 + 16.0 / 116.0)], noise_power=100.0)
    return scenario, stats


class TestTraffic:
    def test_zero_eta_is_poisson_only(self):
        scenario, stats = two_locations((0.3, 0.7))
        means = []
        for seed in range(20):
            trace = run(scenario, Policy('optimized', eta=0.0), 2000, stats, seed=seed)
            assert trace.departures[-1].sum() == 0
            np.testing.assert_array_equal(trace.X, trace.arrivals)
            means.append(trace.X[-1] / 2000)
        np.testing.assert_allclose(np.mean(means, axis=0), [0.3, 0.7], rtol=0.03)

    def test_zero_arrivals_drain_the_initial_flows(self):
        scenario, stats = two_locations((0.0, 0.0))
        trace = run(scenario, Policy('optimized', eta=4.0), 200, stats, seed=6, initial=[5, 2])
        assert trace.arrivals[-1].sum() == 0
        assert trace.departures[-1].tolist() == [5, 2]
        assert trace.X[-1].tolist() == [0, 0]
        assert np.all(np.diff(trace.X.sum(axis=1)) <= 0)

    def test_raising_one_rate_never_lowers_occupancy(self):
        low_scenario, stats = two_locations((0.5, 1.5))
        high_scenario = low_scenario.with_arrival_rates([2.0, 1.5])
        policy = Policy('optimized', eta=4.0)
        low = np.mean([run(low_scenario, policy, 3000, stats, seed=s).X.mean(axis=0) for s in range(20)], axis=0)
        high = np.mean([run(high_scenario, policy, 3000, stats, seed=s).X.mean(axis=0) for s in range(20)], axis=0)
        assert np.all(high >= low)
        assert high[0] > 2 * low[0]

    def test_policies_share_the_arrival_sequence(self):
        scenario, stats = two_locations((0.8, 0.6))
        random_trace = run(scenario, Policy('random'), 500, stats, seed=12)
        fixed_trace = run(scenario, Policy('optimized', eta=4.0), 500, stats, seed=12)
        tdma_trace = run(scenario, Policy('tdma', eta=4.0), 500, stats, seed=12)
        np.testing.assert_array_equal(random_trace.arrivals, fixed_trace.arrivals)
        np.testing.assert_array_equal(tdma_trace.arrivals, fixed_trace.arrivals)

    def test_static_policy_designs_phases_once(self, monkeypatch):
        scenario, stats = two_locations((0.8, 0.6))
        calls = []
        real_optimize = flowsim.optimize

        def counting_optimize(*args, **kwargs):
            calls.append(kwargs.get('mode'))
            return real_optimize(*args, **kwargs)

        monkeypatch.setattr(flowsim, 'optimize', counting_optimize)
        policy = build_policy('optimized', scenario, stats, options=PhaseOptions(n_rand=50))
        assert len(calls) == 1
        run(scenario, policy, 300, stats, seed=0)
        run(scenario, policy, 300, stats, seed=1)
        assert len(calls) == 1

        tdma = build_policy('tdma', scenario, stats, solution=policy.solution)
        run(scenario, tdma, 300, stats, seed=0)
        assert len(calls) == 1
        assert tdma.eta == policy.eta


class TestSweep:
    def test_random_phases_diverge_first(self):
        scenario, stats = rank_one_link()
        policies = [Policy('optimized', eta=16.0), Policy('random')]
        points = sweep_policies(scenario, stats, policies, [1.0], [0.2, 0.5, 1.4], horizon=4000, seed=3)

        assert [p.policy for p in points] == ['optimized', 'random'] * 3
        assert [p.scale for p in points[::2]] == [0.2, 0.5, 1.4]
        assert first_unstable_scale(points, 'random') <= 0.5
        assert first_unstable_scale(points, 'optimized') == 1.4
        at_half = {p.policy: p for p in points if p.scale == 0.5}
        assert at_half['random'].metric > 10 * at_half['optimized'].metric
        assert at_half['random'].arrival_rates == (0.5,)

    def test_policies_see_the_same_arrivals(self):
        scenario, stats = two_locations()
        policies = [Policy('optimized', eta=4.0), Policy('tdma', eta=4.0)]
        [concurrent, shared] = sweep_policies(scenario, stats, policies, [1.0, 0.0], [0.5], horizon=300, seed=4)
        # a lone location is served identically under both policies
        assert concurrent.metric == shared.metric
        assert concurrent.arrival_rates == (0.5, 0.0)

    def test_never_unstable(self):
        scenario, stats = two_locations()
        points = sweep_policies(scenario, stats, [Policy('optimized', eta=4.0)], [1.0, 1.0], [0.01], horizon=200, seed=0)
        assert first_unstable_scale(points, 'optimized') == math.inf
        assert first_unstable_scale(points, 'random') == math.inf

    @pytest.mark.parametrize('direction, scales', [([1.0], [0.5]), ([-1.0, 1.0], [0.5]), ([0.0, 0.0], [0.5]),
                                                   ([1.0, 1.0], [-0.1])])
    def test_invalid_grid(self, direction, scales):
        scenario, stats = two_locations()
        with pytest.raises(DomainError):
            sweep_policies(scenario, stats, [Policy('optimized', eta=4.0)], direction, scales, horizon=10, seed=0)


@pytest.mark.slow
def test_boundary_brackets_convergence_and_divergence():
    scenario, stats, policy = single_queue(mu=2.0, lam=0.0)
    [point] = estimate_region(scenario, stats, policy, [[1.0]], horizon=8000, threshold=5e-3, seed=21,
                              window=500, tol=0.02)
    verdicts = {}
    for factor in (0.8, 1.2):
        trace = run(scenario.with_arrival_rates([factor * point.scale]), policy, 40000, stats, seed=33)
        verdicts[factor] = trend_test(moving_average(trace, 2000)['sum'], fraction=0.25, threshold=1e-3)
    assert not verdicts[0.8].diverging
    assert verdicts[1.2].diverging

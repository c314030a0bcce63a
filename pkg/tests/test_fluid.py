import math

import numpy as np
import pytest

from ris_flow.errors import DomainError, InvalidModelError, NumericError
from ris_flow.flowsim import Policy
from ris_flow.fluid import (
    FluidState,
    drift_check,
    fluid_boundary,
    fluid_integrate,
    log_gain_check,
    log_gain_sweep,
    lyapunov_value,
    lyapunov_weights,
    make_rate_map,
    scaled_path_gap,
    select_epsilon,
)
from tests.conftest import identity_stats, toy_scenario

SOLO_BITS = 1e3 * np.log2(1.8)


def constant_rate_map(mu):
    mu = np.asarray(mu, dtype=float)
    return lambda active: mu


def two_locations(arrival_rates=(0.5, 0.5)):
    stats = identity_stats([1.0, 0.5], np.ones(16))
    return toy_scenario(list(arrival_rates), noise_power=0.01), stats


class TestRateMap:
    def test_single_location(self):
        stats = identity_stats([1.0], [1.0])
        rate_map = make_rate_map(toy_scenario([0.5], [SOLO_BITS / 2.0]), stats, 4.0)
        assert rate_map(np.array([True]))[0] == pytest.approx(2.0)

    def test_concurrent_rates_fall_with_occupancy(self):
        scenario, stats = two_locations()
        rate_map = make_rate_map(scenario, stats, 4.0)
        both = rate_map(np.array([True, True]))
        alone = rate_map(np.array([True, False]))
        assert both[0] < alone[0]
        # An empty location is quoted at the rate it would get on arrival
        assert alone[1] == pytest.approx(both[1])

    def test_tdma_shares_the_free_rate(self):
        scenario, stats = two_locations()
        rate_map = make_rate_map(scenario, stats, 4.0, 'tdma')
        free = rate_map(np.array([False, False]))
        np.testing.assert_allclose(rate_map(np.array([True, True])), free / 2)
        np.testing.assert_allclose(rate_map(np.array([True, False])), [free[0], free[1] / 2])

    def test_random_policy_has_no_map(self):
        scenario, stats = two_locations()
        with pytest.raises(InvalidModelError):
            make_rate_map(scenario, stats, 4.0, 'random')


class TestIntegration:
    def test_single_queue_drains_linearly(self):
        path = fluid_integrate(np.array([1.0]), [0.5], constant_rate_map([2.0]), horizon=1.0, dt=1e-3)
        assert path.drain_time() == pytest.approx(1.0 / 1.5, abs=2e-3)
        assert path.Y.min() >= 0

    def test_overloaded_location_grows(self):
        path = fluid_integrate(np.array([0.0, 1.0]), [3.0, 0.5], constant_rate_map([2.0, 2.0]), horizon=2.0, dt=1e-2)
        assert path.Y[-1, 0] == pytest.approx(2.0, rel=1e-6)
        assert path.drain_time() == math.inf

    def test_drained_location_stays_empty(self):
        path = fluid_integrate(np.array([0.0, 0.5]), [1.0, 0.0], constant_rate_map([2.0, 2.0]), horizon=1.0, dt=1e-2)
        assert np.all(path.Y[:, 0] == 0.0)

    def test_frame_columns(self):
        path = fluid_integrate(FluidState.normalized([1.0, 1.0]), [0.1, 0.1], constant_rate_map([1.0, 1.0]),
                               horizon=0.1, dt=0.05)
        assert list(path.to_frame().columns) == ['t', 'Y_1', 'Y_2', 'sum']
        assert path.Y[0].sum() == pytest.approx(1.0)

    @pytest.mark.parametrize('horizon, dt', [(1.0, 0.0), (0.0, 0.1)])
    def test_bad_steps(self, horizon, dt):
        with pytest.raises(DomainError):
            fluid_integrate(np.ones(1), [0.1], constant_rate_map([1.0]), horizon, dt)

    def test_negative_volume(self):
        with pytest.raises(DomainError):
            FluidState(Y=np.array([-0.1]))

    def test_step_budget(self):
        with pytest.raises(NumericError):
            fluid_integrate(np.ones(1), [0.1], constant_rate_map([1.0]), horizon=10.0, dt=1e-3, max_steps=9999)
        path = fluid_integrate(np.ones(1), [0.1], constant_rate_map([1.0]), horizon=10.0, dt=1e-3, max_steps=10000)
        assert path.times.shape[0] == 10001

    def test_infinite_horizon(self):
        with pytest.raises(NumericError):
            fluid_integrate(np.ones(1), [0.1], constant_rate_map([1.0]), horizon=math.inf, dt=1e-3)


class TestDrift:
    def test_single_queue_bound_is_exact(self):
        lam, mu = 0.5, 2.0
        path = fluid_integrate(np.array([1.0]), [lam], constant_rate_map([mu]), horizon=1.0, dt=1e-4)
        report = drift_check(path, [lam], gamma=1.0, epsilon=0.1)
        assert report.stable
        assert report.bound_T == pytest.approx(1.0 / (mu - lam), rel=1e-9)
        assert report.drains_in_time
        assert report.max_drift < 0

    def test_unstable_rates_flagged(self):
        path = fluid_integrate(np.array([1.0, 1.0]), [3.0, 0.5], constant_rate_map([2.0, 2.0]), horizon=2.0, dt=1e-2)
        report = drift_check(path, [3.0, 0.5], gamma=1.0, epsilon=0.1)
        assert not report.stable
        assert report.bound_T == math.inf
        assert not report.drains_in_time

    def test_empty_start(self):
        path = fluid_integrate(np.zeros(2), [0.1, 0.1], constant_rate_map([1.0, 1.0]), horizon=1.0, dt=0.1)
        report = drift_check(path, [0.1, 0.1], gamma=0.9, epsilon=0.1)
        assert report.stable and report.bound_T == 0.0 and report.samples == 0

    def test_needs_two_samples(self):
        path = fluid_integrate(np.ones(1), [0.1], constant_rate_map([1.0]), horizon=0.1, dt=0.1)
        short = type(path)(times=path.times[:1], Y=path.Y[:1], slopes=path.slopes[:1], rates=path.rates[:1])
        with pytest.raises(DomainError):
            drift_check(short, [0.1], 1.0, 0.1)

    def test_report_dict(self):
        path = fluid_integrate(np.array([1.0]), [0.5], constant_rate_map([2.0]), horizon=1.0, dt=1e-2)
        payload = drift_check(path, [0.5], 1.0, 0.1).to_dict()
        assert set(payload) >= {'max_drift', 'xi', 'bound_T', 'drain_time', 'stable'}
        assert 'values' not in payload


class TestLyapunov:
    def test_weights(self):
        z = 0.9 * 0.5 + 0.1
        assert lyapunov_weights([0.5], 0.9, 0.1)[0] == pytest.approx(math.exp(z) / (math.exp(z) - 1))

    def test_value(self):
        w = lyapunov_weights([0.2, 0.4], 1.0, 0.05)
        assert lyapunov_value([1.0, 2.0], [0.2, 0.4], 1.0, 0.05) == pytest.approx(0.5 * (w[0] + 4 * w[1]))

    def test_weights_need_positive_exponent(self):
        with pytest.raises(DomainError):
            lyapunov_weights([0.0], 1.0, 0.0)


class TestBoundary:
    def test_single_queue_boundary(self):
        scale = fluid_boundary(constant_rate_map([2.0]), [1.0], scale_max=4.0, horizon=1000.0, dt=0.5)
        assert scale == pytest.approx(2.0, abs=0.01)

    def test_unbounded_within_scale_max(self):
        assert fluid_boundary(constant_rate_map([2.0]), [1.0], scale_max=1.0, horizon=100.0, dt=0.5) == 1.0

    def test_select_epsilon(self):
        eps = select_epsilon([0.6, 0.8], 1.0, 2.0, [0.6, 0.8])
        assert eps == pytest.approx(0.5 * (2.0 - 1.0) * 0.6)

    def test_select_epsilon_outside(self):
        with pytest.raises(DomainError):
            select_epsilon([3.0], 1.0, 2.0, [1.0])


class TestLogGain:
    def test_equality_at_full_accuracy(self):
        assert log_gain_check(1.0, 3.0)

    def test_strict_below_one(self):
        assert log_gain_check(0.5, 10.0)

    @pytest.mark.parametrize('gamma, x', [(0.0, 1.0), (1.5, 1.0), (0.5, 0.0)])
    def test_domain(self, gamma, x):
        with pytest.raises(DomainError):
            log_gain_check(gamma, x)

    def test_sweep_has_no_violations(self):
        assert log_gain_sweep(10000, np.random.default_rng(0)) == 0


def test_scaled_path_approaches_fluid():
    stats = identity_stats([1.0], [1.0])
    scenario = toy_scenario([1.0], [SOLO_BITS / 2.0])
    gap = scaled_path_gap(scenario, stats, Policy('optimized', eta=4.0), [1.0], beta=2000, horizon=1.5, seed=3)
    assert gap < 0.2


def test_scaled_path_gap_shrinks_with_scale():
    stats = identity_stats([1.0], [1.0])
    scenario = toy_scenario([1.0], [SOLO_BITS / 2.0])
    policy = Policy('optimized', eta=4.0)
    gaps = [
        np.mean([scaled_path_gap(scenario, stats, policy, [1.0], beta=beta, horizon=1.5, seed=seed) for seed in range(4)])
        for beta in (20, 200, 2000)
    ]
    assert gaps[0] > gaps[1] > gaps[2]

import math

import numpy as np
import pytest

from ris_flow.channel import (
    ChannelStats,
    CorrelationModel,
    PathlossParams,
    Scenario,
    build_correlation,
    build_stats,
    covariance_factor,
    grid_locations,
    sample_realization,
    sample_realizations,
    three_slope_pathloss,
    uniform_subregion,
)
from ris_flow.errors import DegenerateGeometryError, DomainError, InvalidDimensionError, InvalidModelError, NumericError
from ris_flow.sinr import PhaseConfig, eta_trace


def make_scenario(locations, aps=((-0.9, -0.9), (-0.8, -0.95)), **kwargs) -> Scenario:
    K = len(locations)
    params = dict(
        ap_positions=np.array(aps, dtype=float),
        ris_position=np.zeros(2),
        location_positions=np.array(locations, dtype=float),
        ris_elements=8,
        bandwidth_hz=20e6,
        noise_power=1e-20,
        powers=np.full(K, 0.1),
        mean_file_sizes=np.full(K, 1e6),
        arrival_rates=np.full(K, 0.1),
        slot_duration_s=0.01,
    )
    params.update(kwargs)
    return Scenario(**params)


class TestPathloss:
    def test_fixed_loss_at_default_heights(self):
        assert PathlossParams().fixed_loss_db == pytest.approx(140.715, abs=1e-2)

    def test_one_kilometre_gain_is_the_fixed_loss(self):
        gain = three_slope_pathloss(1.0)
        assert 10 * math.log10(gain) == pytest.approx(-PathlossParams().fixed_loss_db, abs=1e-9)

    def test_middle_slope(self):
        params = PathlossParams()
        expected = -params.fixed_loss_db - 15 * math.log10(0.05) - 20 * math.log10(0.02)
        assert 10 * math.log10(three_slope_pathloss(0.02, params)) == pytest.approx(expected, abs=1e-9)

    def test_flat_below_first_breakpoint(self):
        assert three_slope_pathloss(0.001) == pytest.approx(three_slope_pathloss(0.01), rel=1e-12)

    def test_continuous_at_breakpoints(self):
        for d in (0.01, 0.05):
            assert three_slope_pathloss(d * (1 + 1e-9)) == pytest.approx(three_slope_pathloss(d), rel=1e-6)

    def test_nonincreasing_in_distance(self):
        gains = three_slope_pathloss(np.logspace(-3, 0.5, 200))
        assert np.all(np.diff(gains) <= 0)

    def test_array_shape_preserved(self):
        assert three_slope_pathloss(np.array([[0.1, 0.2], [0.3, 0.4]])).shape == (2, 2)

    @pytest.mark.parametrize('distance', [0.0, -0.2])
    def test_nonpositive_distance_rejected(self, distance):
        with pytest.raises(DomainError):
            three_slope_pathloss(distance)


class TestCorrelation:
    def test_exponential_entries(self):
        rho = 0.3 + 0.4j
        R = build_correlation(CorrelationModel(kind='exponential', rho_t=rho, rho_r=0.1), 5, 't')
        assert R[0, 1] == pytest.approx(rho)
        assert R[1, 0] == pytest.approx(np.conj(rho))
        assert R[0, 3] == pytest.approx(rho ** 3)
        np.testing.assert_allclose(np.diag(R), 1.0)
        np.testing.assert_allclose(R, R.conj().T)

    def test_sides_use_their_own_coefficient(self):
        model = CorrelationModel(kind='exponential', rho_t=0.5, rho_r=0.2)
        assert build_correlation(model, 3, 't')[0, 1] == pytest.approx(0.5)
        assert build_correlation(model, 3, 'r')[0, 1] == pytest.approx(0.2)

    def test_identity(self):
        np.testing.assert_array_equal(build_correlation(CorrelationModel(), 6), np.eye(6))

    def test_isotropic_half_wavelength(self):
        R = build_correlation(CorrelationModel(kind='isotropic', spacing_wavelengths=0.5), 4)
        np.testing.assert_allclose(np.diag(R), 1.0)
        assert abs(R[0, 1]) < 1e-12
        assert np.linalg.eigvalsh(R).min() > -1e-10

    def test_out_of_range_rho(self):
        with pytest.raises(InvalidModelError):
            build_correlation(CorrelationModel(kind='exponential', rho_t=1.5), 4)

    def test_empty_surface(self):
        with pytest.raises(InvalidDimensionError):
            build_correlation(CorrelationModel(), 0)

    def test_symmetric_flag(self):
        assert CorrelationModel(kind='exponential', rho_t=0.5, rho_r=0.5).symmetric
        assert not CorrelationModel(kind='exponential', rho_t=0.5, rho_r=0.4).symmetric


class TestGeometry:
    def test_grid_corners(self):
        points = grid_locations(4, (0.0, 0.0), (1.0, 1.0))
        assert {tuple(p) for p in points.tolist()} == {(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)}

    def test_grid_needs_square_count(self):
        with pytest.raises(InvalidDimensionError):
            grid_locations(5, (0.0, 0.0), (1.0, 1.0))

    def test_uniform_subregion_bounds(self):
        points = uniform_subregion(500, (-1.0, -1.0), (-0.75, -0.75), np.random.default_rng(1))
        assert points.shape == (500, 2)
        assert np.all(points >= -1.0) and np.all(points <= -0.75)

    def test_location_on_ris_rejected(self):
        scenario = make_scenario([(0.0, 0.0), (0.5, 0.5)])
        with pytest.raises(DegenerateGeometryError):
            build_stats(scenario, CorrelationModel())

    def test_position_outside_area_rejected(self):
        with pytest.raises(DomainError):
            make_scenario([(1.5, 0.2)])

    def test_negative_arrival_rate_rejected(self):
        with pytest.raises(DomainError):
            make_scenario([(0.3, 0.3)], arrival_rates=np.array([-0.1]))

    def test_with_arrival_rates_changes_fingerprint(self):
        scenario = make_scenario([(0.3, 0.3), (0.6, 0.6)])
        changed = scenario.with_arrival_rates([0.2, 0.3])
        np.testing.assert_allclose(changed.arrival_rates, [0.2, 0.3])
        assert changed.fingerprint() != scenario.fingerprint()
        assert scenario.fingerprint() == make_scenario([(0.3, 0.3), (0.6, 0.6)]).fingerprint()


class TestStats:
    def test_gains_follow_distance(self):
        scenario = make_scenario([(0.25, 0.25), (0.75, 0.75)])
        stats = build_stats(scenario, CorrelationModel(kind='exponential', rho_t=0.6, rho_r=0.4 + 0.2j))
        assert stats.alpha_user[0] > stats.alpha_user[1] > 0
        assert stats.alpha_ap.shape == (2,)
        np.testing.assert_allclose(stats.R, stats.R_t * stats.R_r.T)
        assert not stats.symmetric

    def test_shadowing_is_seeded(self):
        scenario = make_scenario([(0.25, 0.25)], pathloss=PathlossParams(shadow_std_db=8.0))
        first = build_stats(scenario, CorrelationModel(), np.random.default_rng(3))
        second = build_stats(scenario, CorrelationModel(), np.random.default_rng(3))
        plain = build_stats(make_scenario([(0.25, 0.25)]), CorrelationModel())
        np.testing.assert_array_equal(first.alpha_user, second.alpha_user)
        assert first.alpha_user[0] != plain.alpha_user[0]

    def test_nonpositive_gain_rejected(self):
        with pytest.raises(DomainError):
            ChannelStats.from_correlations([0.0], [1.0], np.eye(2))


class TestSampling:
    def test_factor_of_positive_definite(self):
        C = build_correlation(CorrelationModel(kind='exponential', rho_t=0.7j), 5)
        F = covariance_factor(C)
        np.testing.assert_allclose(F @ F.conj().T, C, atol=1e-12)

    def test_factor_of_rank_deficient(self):
        C = np.ones((3, 3), dtype=complex)
        F = covariance_factor(C)
        np.testing.assert_allclose(F @ F.conj().T, C, atol=1e-10)

    def test_indefinite_rejected(self):
        with pytest.raises(NumericError):
            covariance_factor(np.diag([1.0, -1.0]))

    def test_shapes(self):
        stats = ChannelStats.from_correlations([1.0, 2.0, 3.0], [1.0, 1.0], np.eye(4, dtype=complex))
        g, h = sample_realizations(stats, np.random.default_rng(0), 7)
        assert g.shape == (7, 3, 4)
        assert h.shape == (7, 2, 4)
        one = sample_realization(stats, np.random.default_rng(0))
        assert one.g.shape == (3, 4) and one.h.shape == (2, 4)

    def test_empirical_covariance(self):
        R_t = build_correlation(CorrelationModel(kind='exponential', rho_t=0.5), 4)
        R_r = build_correlation(CorrelationModel(kind='exponential', rho_t=0.3 + 0.3j), 4)
        stats = ChannelStats.from_correlations([2.0], [0.5], R_t, R_r)
        n = 20000
        g, h = sample_realizations(stats, np.random.default_rng(11), n)
        g_cov = g[:, 0, :].T @ g[:, 0, :].conj() / n
        h_cov = h[:, 0, :].T @ h[:, 0, :].conj() / n
        assert np.linalg.norm(g_cov - 2.0 * R_r) / np.linalg.norm(2.0 * R_r) < 0.05
        assert np.linalg.norm(h_cov - 0.5 * R_t) / np.linalg.norm(0.5 * R_t) < 0.05


class TestInvariants:
    def test_schur_product_stays_psd(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            rho_t, rho_r = np.sqrt(rng.uniform(0, 1, 2)) * np.exp(1j * rng.uniform(0, 2 * math.pi, 2))
            model = CorrelationModel(kind='exponential', rho_t=rho_t, rho_r=rho_r)
            stats = ChannelStats.from_correlations([1.0], [1.0], build_correlation(model, 8, 't'),
                                                   build_correlation(model, 8, 'r'))
            np.testing.assert_allclose(stats.R, stats.R.conj().T, atol=1e-12)
            assert np.linalg.eigvalsh(stats.R).min() > -1e-10

    def test_equal_sides_give_real_nonnegative_product(self):
        R_t = build_correlation(CorrelationModel(kind='exponential', rho_t=0.5 + 0.6j), 6)
        stats = ChannelStats.from_correlations([1.0], [1.0], R_t)
        assert stats.symmetric
        np.testing.assert_allclose(np.imag(stats.R), 0.0, atol=1e-15)
        assert np.real(stats.R).min() >= 0
        np.testing.assert_allclose(np.real(stats.R), np.abs(R_t) ** 2)

    def test_aggregated_channel_moments(self):
        M = 4
        R_t = build_correlation(CorrelationModel(kind='exponential', rho_t=0.6), M)
        R_r = build_correlation(CorrelationModel(kind='exponential', rho_t=0.4 + 0.2j), M)
        stats = ChannelStats.from_correlations([1.0, 0.5], [2.0, 0.7], R_t, R_r)
        rng = np.random.default_rng(23)
        phase = PhaseConfig(theta=rng.uniform(0, 2 * math.pi, M))
        n = 100000
        g, h = sample_realizations(stats, rng, n)
        # u[b, n, j] = h_n^H Theta g_j
        u = np.einsum('bnm,m,bjm->bnj', h.conj(), phase.phi, g).reshape(n, -1)

        expected = np.outer(stats.alpha_ap, stats.alpha_user).ravel() * eta_trace(phase, stats)
        second = np.mean(np.abs(u) ** 2, axis=0)
        np.testing.assert_allclose(second, expected, rtol=0.03)

        gram = u.T @ u.conj() / n
        scale = np.sqrt(np.outer(second, second))
        off_diagonal = ~np.eye(u.shape[1], dtype=bool)
        assert np.max(np.abs(gram / scale)[off_diagonal]) < 0.02
        assert np.max(np.abs(np.mean(u, axis=0)) / np.sqrt(second)) < 0.02

"""Self-checks run by the ``validate`` command.

Every oracle builds its own small synthetic instances from a seed derived from
the experiment seed, measures one quantity with a known exact answer or a
proven bound and compares it with a tolerance. A reduced budget draws fewer
samples and widens the statistical tolerances accordingly.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from ris_flow.channel import ChannelStats, CorrelationModel, Scenario, build_correlation, sample_realizations
from ris_flow.flowsim import Policy, run, stability_metric
from ris_flow.fluid import (
    FluidState,
    drift_check,
    fluid_boundary,
    fluid_integrate,
    log_gain_sweep,
    make_rate_map,
    select_epsilon,
)
from ris_flow.models import ValidateSection
from ris_flow.phase_opt import PhaseOptions, brute_force_opt, discrete_bound, equal_phase_config, optimize, quadratic_value
from ris_flow.sinr import (
    PhaseConfig,
    SinrInputs,
    eta,
    eta_trace,
    rate,
    sample_sinr_terms,
    sinr_closed_form,
    sinr_terms_exact,
    sinr_vector,
)
from utils import derive_seed, log_to_run_file

logger = logging.getLogger(__name__)

QUARTER_PI = math.pi / 4.0


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ''
    elapsed_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ValidationBudget:
    """Sample sizes and tolerance widening for one validation run."""
    samples: int
    trials: int
    queue_slots: int
    widen: float
    min_fraction: float
    reduced: bool

    @classmethod
    def from_settings(cls, section: ValidateSection) -> 'ValidationBudget':
        if section.budget == 'reduced':
            return cls(
                samples=max(section.samples // 5, 1000),
                trials=max(section.trials // 5, 10),
                queue_slots=max(section.queue_slots // 4, 20000),
                widen=2.5,
                min_fraction=0.9,
                reduced=True,
            )
        return cls(
            samples=section.samples,
            trials=section.trials,
            queue_slots=section.queue_slots,
            widen=1.0,
            min_fraction=0.99,
            reduced=False,
        )


def _random_correlation(rng: np.random.Generator, M: int) -> np.ndarray:
    rho = rng.uniform(0.0, 0.9) * np.exp(1j * rng.uniform(0.0, 2.0 * np.pi))
    return build_correlation(CorrelationModel(kind='exponential', rho_t=rho, rho_r=rho), M, 't')


def _random_psd(rng: np.random.Generator, M: int) -> np.ndarray:
    A = (rng.standard_normal((M, M)) + 1j * rng.standard_normal((M, M))) / math.sqrt(2.0)
    R = A @ A.conj().T / M
    return 0.5 * (R + R.conj().T)


def _toy_scenario(arrival_rates, mean_file_sizes, noise_power: float = 1.0) -> Scenario:
    """Scenario shell for oracles that supply their own channel statistics."""
    K = len(arrival_rates)
    return Scenario(
        ap_positions=np.array([[-0.9, -0.9]]),
        ris_position=np.zeros(2),
        location_positions=np.column_stack([np.linspace(0.2, 0.8, K), np.linspace(0.2, 0.8, K)]),
        ris_elements=4,
        bandwidth_hz=1e6,
        noise_power=noise_power,
        powers=np.ones(K),
        mean_file_sizes=np.asarray(mean_file_sizes, dtype=float),
        arrival_rates=np.asarray(arrival_rates, dtype=float),
        slot_duration_s=1e-3,
        name='oracle',
    )


def check_trace_identity(seed: int, budget: ValidationBudget) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(budget.trials):
        M = int(rng.integers(2, 17))
        stats = ChannelStats.from_correlations([1.0], [1.0], _random_correlation(rng, M), _random_correlation(rng, M))
        phase = PhaseConfig(theta=rng.uniform(0.0, 2.0 * np.pi, M))
        direct, via_trace = eta(phase, stats), eta_trace(phase, stats)
        worst = max(worst, abs(direct - via_trace) / max(abs(direct), 1e-300))
    tolerance = 1e-10
    return OracleResult('trace identity', worst <= tolerance, worst, tolerance, f"{budget.trials} random triples")


def check_sinr_moments(seed: int, budget: ValidationBudget) -> OracleResult:
    """Sampled desired-signal, uncertainty, interference and noise terms against their exact finite-M values.

    Interference dominates the noise here, so every term of the effective
    SINR is exercised. The closed form is reported next to the exact value;
    its gap is of order 1 / M and is not part of the pass criterion.
    """
    M, N, K = (64, 16, 4) if budget.reduced else (256, 16, 4)
    scenarios = 10
    worst_term = 0.0
    worst_sinr = 0.0
    worst_gap = 0.0
    for i in range(scenarios):
        rng = np.random.default_rng(derive_seed(seed, i))
        if i % 2:
            model = CorrelationModel(kind='exponential', rho_t=0.5, rho_r=0.3 + 0.2j)
            stats = ChannelStats.from_correlations(rng.uniform(0.5, 2.0, K), rng.uniform(0.5, 2.0, N),
                                                   build_correlation(model, M, 't'), build_correlation(model, M, 'r'))
        else:
            eye = np.eye(M, dtype=complex)
            stats = ChannelStats(alpha_user=rng.uniform(0.5, 2.0, K), alpha_ap=rng.uniform(0.5, 2.0, N),
                                 R_t=eye, R_r=eye.copy(), R=eye.copy())
        phase = PhaseConfig(theta=rng.uniform(0.0, 2.0 * np.pi, M))
        eta_value = eta(phase, stats)
        s1, s2 = float(np.sum(stats.alpha_ap)), float(np.sum(stats.alpha_ap ** 2))
        powers = np.ones(K)
        noise = 0.1 * s2 * eta_value * float(np.sum(stats.alpha_user * powers)) / s1
        inputs = SinrInputs(stats=stats, eta=eta_value, active=list(range(K)), powers=powers, noise_power=noise)

        exact = sinr_terms_exact(0, inputs, phase)
        sampled = sample_sinr_terms(0, inputs, phase, budget.samples, rng)
        errors = [
            abs(sampled.signal - exact.signal) / exact.signal,
            abs(sampled.uncertainty - exact.uncertainty) / exact.uncertainty,
            abs(sampled.noise - exact.noise) / exact.noise,
            float(np.max(np.abs(sampled.interference[1:] - exact.interference[1:]) / exact.interference[1:])),
        ]
        worst_term = max(worst_term, max(errors))
        worst_sinr = max(worst_sinr, abs(sampled.sinr - exact.sinr) / exact.sinr)
        worst_gap = max(worst_gap, sinr_closed_form(0, inputs) / exact.sinr - 1.0)

    term_tolerance = 0.05 * budget.widen
    tolerance = 0.02 * budget.widen
    passed = worst_sinr <= tolerance and worst_term <= term_tolerance
    return OracleResult('SINR moments vs exact finite-M terms', passed, worst_sinr, tolerance,
                        f"{scenarios} scenarios, M={M}, N={N}, K={K}, {budget.samples} samples; "
                        f"worst term error {worst_term:.4f} (tolerance {term_tolerance:.3f}), "
                        f"closed-form overestimate up to {worst_gap:.4f}")


def check_sdr_ratio(seed: int, budget: ValidationBudget) -> OracleResult:
    """Randomized rounding keeps eta within pi/4 of the relaxation and of the 16-level grid optimum."""
    rng = np.random.default_rng(seed)
    options = PhaseOptions(n_rand=1000)
    certified = 0
    for i in range(budget.trials):
        R = _random_psd(rng, 8 if i % 2 == 0 else 16)
        certified += optimize(R, 'continuous', options, rng).gamma_certified >= QUARTER_PI
    fraction = certified / budget.trials

    grid_checks = 3 if budget.reduced else 15
    worst_ratio = math.inf
    for i in range(grid_checks):
        M = 4 if budget.reduced else 4 + i % 3
        R = _random_psd(rng, M)
        achieved = optimize(R, 'continuous', options, rng).eta_achieved
        _, grid_best = brute_force_opt(R, 16)
        worst_ratio = min(worst_ratio, achieved / grid_best)

    passed = fraction >= budget.min_fraction and worst_ratio >= QUARTER_PI
    return OracleResult('SDR pi/4 guarantee', passed, fraction, budget.min_fraction,
                        f"worst ratio to 16-level grid optimum {worst_ratio:.4f} over {grid_checks} instances")


def check_equal_phase(seed: int, budget: ValidationBudget) -> OracleResult:
    """With identical correlation on both sides, equal phases match exhaustive search."""
    rng = np.random.default_rng(seed)
    M = 4
    worst = 0.0
    for _ in range(20):
        R_t = _random_correlation(rng, M)
        R = ChannelStats.from_correlations([1.0], [1.0], R_t).R
        equal = quadratic_value(R, equal_phase_config(M).phi)
        _, grid_best = brute_force_opt(R, 16)
        worst = max(worst, (grid_best - equal) / grid_best)
    tolerance = 1e-9
    return OracleResult('equal phases optimal for symmetric correlation', worst <= tolerance, worst, tolerance,
                        "20 random rho, M=4, 16 levels")


def check_discrete_bound(seed: int, budget: ValidationBudget) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst_fraction = 1.0
    details = []
    for levels in (2, 4, 8):
        options = PhaseOptions(n_rand=1000, levels=levels)
        bound = discrete_bound(levels)
        hits = 0
        for _ in range(budget.trials):
            solution = optimize(_random_psd(rng, 8), 'discrete', options, rng)
            hits += solution.eta_achieved / solution.sdp_upper >= bound
        fraction = hits / budget.trials
        worst_fraction = min(worst_fraction, fraction)
        details.append(f"L={levels}: {hits}/{budget.trials}")
    return OracleResult('discrete phase bound', worst_fraction >= budget.min_fraction, worst_fraction,
                        budget.min_fraction, ", ".join(details))


def check_rate_inequality(seed: int, budget: ValidationBudget) -> OracleResult:
    violations = log_gain_sweep(10000, np.random.default_rng(seed))
    return OracleResult('log(1+gx) >= g log(1+x)', violations == 0, float(violations), 0.0, "10000 random pairs")


def check_single_queue(seed: int, budget: ValidationBudget) -> OracleResult:
    """A single location at constant rate is an M/M/1 queue with mean rho / (1 - rho)."""
    M, mu, load = 4, 2.0, 0.5
    stats = ChannelStats.from_correlations([1.0], [1.0], np.eye(M, dtype=complex))
    bits = rate(sinr_vector(stats, float(M), np.zeros(1), np.ones(1), 1.0)[0], 1e6, 1e-3)
    scenario = _toy_scenario([load * mu], [bits / mu])
    policy = Policy(kind='optimized', eta=float(M))
    trace = run(scenario, policy, budget.queue_slots, stats, seed=seed)
    measured = stability_metric(trace)
    expected = load / (1.0 - load)
    error = abs(measured - expected) / expected
    tolerance = 0.05 * (2.0 if budget.reduced else 1.0)
    return OracleResult('M/M/1 mean occupancy', error <= tolerance, error, tolerance,
                        f"mean {measured:.4f} vs {expected:.4f} over {budget.queue_slots} slots")


def check_fluid_drain(seed: int, budget: ValidationBudget) -> OracleResult:
    """Inside the fluid boundary the Lyapunov drift is negative and the fluid drains in time; outside it is not."""
    M = 4
    stats = ChannelStats(
        alpha_user=np.array([1.0, 0.5]),
        alpha_ap=np.ones(M),
        R_t=np.eye(M, dtype=complex),
        R_r=np.eye(M, dtype=complex),
        R=np.eye(M, dtype=complex),
    )
    scenario = _toy_scenario([0.0, 0.0], [1000.0, 1000.0])
    solution = optimize(stats.R, 'equal')
    rate_map = make_rate_map(scenario, stats, solution.eta_achieved, 'optimized')
    direction = np.array([1.0, 1.0]) / math.sqrt(2.0)
    scale_max = 4.0 * float(np.linalg.norm(rate_map(np.zeros(2, dtype=bool))))
    horizon = 50.0
    boundary = fluid_boundary(rate_map, direction, scale_max, horizon, 1e-2)

    inside = 0.5 * boundary * direction
    epsilon = select_epsilon(inside, solution.gamma_certified, boundary, direction)
    Y0 = FluidState.normalized(direction)
    report_in = drift_check(fluid_integrate(Y0, inside, rate_map, horizon, 1e-3), inside, solution.gamma_certified, epsilon)

    outside = 1.5 * boundary * direction
    report_out = drift_check(fluid_integrate(Y0, outside, rate_map, horizon, 1e-3), outside, solution.gamma_certified, epsilon)

    passed = report_in.stable and report_in.drains_in_time and not report_out.stable
    return OracleResult('fluid drain and Lyapunov drift', passed, report_in.drain_time, report_in.bound_T,
                        f"boundary scale {boundary:.4f}, outside max drift {report_out.max_drift:.4g}")


def check_covariance_sampling(seed: int, budget: ValidationBudget) -> OracleResult:
    rng = np.random.default_rng(seed)
    M = 8
    R_t, R_r = _random_correlation(rng, M), _random_correlation(rng, M)
    stats = ChannelStats.from_correlations([2.0], [0.5], R_t, R_r)
    g, h = sample_realizations(stats, rng, budget.samples)
    g_cov = g[:, 0, :].T @ g[:, 0, :].conj() / budget.samples
    h_cov = h[:, 0, :].T @ h[:, 0, :].conj() / budget.samples
    error = max(
        np.linalg.norm(g_cov - 2.0 * R_r) / np.linalg.norm(2.0 * R_r),
        np.linalg.norm(h_cov - 0.5 * R_t) / np.linalg.norm(0.5 * R_t),
    )
    tolerance = 0.1 * (1.5 if budget.reduced else 1.0)
    return OracleResult('channel covariance sampling', error <= tolerance, float(error), tolerance,
                        f"M={M}, {budget.samples} samples")


ORACLES: Dict[str, Callable[[int, ValidationBudget], OracleResult]] = {
    'trace_identity': check_trace_identity,
    'sinr_moments': check_sinr_moments,
    'sdr_ratio': check_sdr_ratio,
    'equal_phase': check_equal_phase,
    'discrete_bound': check_discrete_bound,
    'rate_inequality': check_rate_inequality,
    'single_queue': check_single_queue,
    'fluid_drain': check_fluid_drain,
    'covariance_sampling': check_covariance_sampling,
}


def run_validation(
    section: ValidateSection,
    seed: int,
    names: Optional[List[str]] = None,
    run_id: Optional[str] = None,
) -> List[OracleResult]:
    """Run the oracle suite.

    Args:
        section: Validation settings (budget and sample sizes).
        seed: Root seed; each oracle gets its own derived seed.
        names: Subset of ``ORACLES`` to run, all when omitted.
        run_id: Run log to report to.

    Returns:
        List[OracleResult]: One result per oracle, in registry order.
    """
    budget = ValidationBudget.from_settings(section)
    selected = list(ORACLES) if names is None else names
    results = []
    for index, name in enumerate(ORACLES):
        if name not in selected:
            continue
        start = time.time()
        result = ORACLES[name](derive_seed(seed, 1000 + index), budget)
        result = OracleResult(**{**result.to_dict(), 'elapsed_s': round(time.time() - start, 3)})
        status = "✅" if result.passed else "❌"
        msg = f"{result.name}: measured {result.measured:.6g}, tolerance {result.tolerance:.6g} ({result.detail})"
        if result.passed:
            logger.info(f"{status} {msg}")
        else:
            logger.error(f"{status} {msg}")
        log_to_run_file(run_id, "validating", f"{'PASS' if result.passed else 'FAIL'} {msg}")
        results.append(result)
    return results

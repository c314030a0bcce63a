import logging
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Deque, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg, stats as sps

from ris_flow.channel import ChannelStats, Scenario
from ris_flow.errors import DomainError, InvalidModelError
from ris_flow.phase_opt import PhaseOptions, PhaseSolution, optimize, random_phases
from ris_flow.sinr import eta as eta_of, rate, sinr_vector
from utils import derive_seed, log_to_run_file

logger = logging.getLogger(__name__)

POLICY_KINDS = ('optimized', 'random', 'tdma', 'equal')


@dataclass
class FlowState:
    """Markov state of the flow-level system: FIFO residual file sizes per location."""
    queues: List[Deque[float]]
    t: int = 0
    tdma_pointer: int = 0
    last_arrivals: Optional[np.ndarray] = None
    last_departures: Optional[np.ndarray] = None
    last_rates: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, num_locations: int) -> 'FlowState':
        return cls(queues=[deque() for _ in range(num_locations)])

    @classmethod
    def from_counts(cls, counts: Sequence[int], mean_sizes: Sequence[float], rng: np.random.Generator) -> 'FlowState':
        """Start with ``counts[k]`` fresh flows at location k."""
        queues = [deque(rng.exponential(size_k, int(n))) for n, size_k in zip(counts, mean_sizes)]
        return cls(queues=queues)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(q) for q in self.queues], dtype=np.int64)


@dataclass(frozen=True)
class Policy:
    """How the RIS is configured and who transmits in a slot.

    ``optimized`` and ``equal`` keep one phase configuration and let every
    occupied location transmit; ``random`` draws fresh phases each slot;
    ``tdma`` keeps the optimized phases and serves one occupied location per
    slot in round-robin order, free of interference.
    """
    kind: str
    eta: Optional[float] = None
    solution: Optional[PhaseSolution] = None
    all_active_transmit: bool = False

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise InvalidModelError(f"Unknown policy: {self.kind}. Must be one of: {', '.join(POLICY_KINDS)}")
        if self.kind != 'random' and self.eta is None:
            raise InvalidModelError(f"Policy '{self.kind}' needs a fixed eta")

    def peak_eta(self, stats: ChannelStats) -> float:
        """Largest eta the policy can ever use."""
        if self.kind == 'random':
            M = stats.num_elements
            return M * float(linalg.eigvalsh(stats.R, subset_by_index=[M - 1, M - 1])[0])
        return float(self.eta)


@dataclass(frozen=True)
class Trace:
    """Recorded sample path. Row 0 is the initial state; row i is the state after slot ``slots[i]``."""
    slots: np.ndarray
    X: np.ndarray
    arrivals: np.ndarray
    departures: np.ndarray
    rates: np.ndarray
    seed: int
    scenario_hash: str

    @property
    def num_locations(self) -> int:
        return self.X.shape[1]

    @property
    def horizon(self) -> int:
        return int(self.slots[-1])

    def to_frame(self, detail: bool = False) -> pd.DataFrame:
        columns = {'slot': self.slots}
        for k in range(self.num_locations):
            columns[f'X_{k + 1}'] = self.X[:, k]
        columns['sum'] = self.X.sum(axis=1)
        if detail:
            for k in range(self.num_locations):
                columns[f'arrivals_{k + 1}'] = self.arrivals[:, k]
                columns[f'departures_{k + 1}'] = self.departures[:, k]
                columns[f'rate_{k + 1}'] = self.rates[:, k]
        return pd.DataFrame(columns)


@dataclass(frozen=True)
class TrendResult:
    slope: float
    stderr: float
    intercept: float
    diverging: bool
    n_points: int


@dataclass(frozen=True)
class SweepPoint:
    """Stability metric and trend verdict of one policy at one load scale."""
    policy: str
    scale: float
    arrival_rates: Tuple[float, ...]
    metric: float
    slope: float
    diverging: bool


@dataclass(frozen=True)
class RegionPoint:
    policy: str
    direction: Tuple[float, ...]
    scale: float
    bracketed: bool
    trials: int = 0

    @property
    def arrival_rates(self) -> Tuple[float, ...]:
        return tuple(self.scale * d for d in self.direction)


def build_policy(
    kind: str,
    scenario: Scenario,
    stats: ChannelStats,
    options: Optional[PhaseOptions] = None,
    mode: str = 'continuous',
    all_active_transmit: bool = False,
    solution: Optional[PhaseSolution] = None,
    run_id: Optional[str] = None,
) -> Policy:
    """Build a policy, running the phase design at most once.

    The design is seeded from ``scenario.seed`` so the optimized and TDMA
    policies of one scenario share the same phases.
    """
    if kind not in POLICY_KINDS:
        raise InvalidModelError(f"Unknown policy: {kind}. Must be one of: {', '.join(POLICY_KINDS)}")
    if kind == 'random':
        return Policy(kind=kind, all_active_transmit=all_active_transmit)
    if solution is None:
        design_mode = 'equal' if kind == 'equal' else mode
        solution = optimize(
            stats.R,
            mode=design_mode,
            options=options,
            rng=np.random.default_rng(scenario.seed),
            symmetric=stats.symmetric,
            run_id=run_id,
        )
    return Policy(kind=kind, eta=solution.eta_achieved, solution=solution, all_active_transmit=all_active_transmit)


def free_rates(policy: Policy, scenario: Scenario, stats: ChannelStats) -> np.ndarray:
    """Bits per slot each location gets when it transmits alone at the policy's peak eta."""
    sinr = sinr_vector(stats, policy.peak_eta(stats), np.zeros(stats.num_locations), scenario.powers, scenario.noise_power)
    return rate(sinr, scenario.bandwidth_hz, scenario.slot_duration_s)


def service_rates(
    policy: Policy,
    counts: np.ndarray,
    state: FlowState,
    scenario: Scenario,
    stats: ChannelStats,
    rng: np.random.Generator,
) -> np.ndarray:
    """Bits per slot granted to each location for the given occupancy."""
    K = counts.shape[0]
    occupied = counts > 0
    rates = np.zeros(K)
    if not occupied.any():
        return rates

    if policy.kind == 'tdma':
        order = (np.arange(K) + state.tdma_pointer) % K
        served = int(order[np.argmax(occupied[order])])
        state.tdma_pointer = (served + 1) % K
        weights = np.zeros(K)
        weights[served] = 1.0
        sinr = sinr_vector(stats, policy.eta, weights, scenario.powers, scenario.noise_power)
        rates[served] = rate(sinr[served], scenario.bandwidth_hz, scenario.slot_duration_s)
        return rates

    if policy.kind == 'random':
        slot_eta = eta_of(random_phases(stats.num_elements, rng), stats)
    else:
        slot_eta = policy.eta
    weights = counts.astype(float) if policy.all_active_transmit else occupied.astype(float)
    sinr = sinr_vector(stats, slot_eta, weights, scenario.powers, scenario.noise_power)
    rates[occupied] = rate(sinr[occupied], scenario.bandwidth_hz, scenario.slot_duration_s)
    return rates


def _drain(queue: Deque[float], budget: float) -> int:
    departures = 0
    while queue and budget > 0:
        head = queue[0]
        if head <= budget:
            budget -= head
            queue.popleft()
            departures += 1
        else:
            queue[0] = head - budget
            budget = 0.0
    return departures


def _serve(queue: Deque[float], capacity: float, epochs: np.ndarray, sizes: np.ndarray) -> int:
    """Serve one slot of unit length at ``capacity`` bits per slot with arrivals at ``epochs``."""
    departures = 0
    clock = 0.0
    for epoch, size in zip(epochs.tolist(), sizes.tolist()):
        departures += _drain(queue, capacity * (epoch - clock))
        queue.append(size)
        clock = epoch
    return departures + _drain(queue, capacity * (1.0 - clock))


def step(
    state: FlowState,
    policy: Policy,
    scenario: Scenario,
    stats: ChannelStats,
    rng: np.random.Generator,
    phase_rng: Optional[np.random.Generator] = None,
) -> FlowState:
    """Advance the state by one slot, in place.

    Poisson arrivals land at uniform epochs inside the slot. Rates are frozen
    for the slot from the occupancy after arrivals, and each location drains
    its FIFO queue at that rate from the start of the slot, carrying leftover
    capacity to the next queued flow. Random phases come from ``phase_rng``
    when given, so the traffic drawn from ``rng`` does not depend on the policy.
    """
    arrivals = rng.poisson(scenario.arrival_rates)
    total = int(arrivals.sum())
    epochs = rng.random(total)
    sizes = rng.exponential(1.0, total) * np.repeat(scenario.mean_file_sizes, arrivals)

    counts = state.counts + arrivals
    rates = service_rates(policy, counts, state, scenario, stats, rng if phase_rng is None else phase_rng)

    departures = np.zeros_like(arrivals)
    offsets = np.concatenate(([0], np.cumsum(arrivals)))
    for k, queue in enumerate(state.queues):
        lo, hi = offsets[k], offsets[k + 1]
        order = np.argsort(epochs[lo:hi], kind='stable')
        departures[k] = _serve(queue, rates[k], epochs[lo:hi][order], sizes[lo:hi][order])

    state.t += 1
    state.last_arrivals = arrivals
    state.last_departures = departures
    state.last_rates = rates
    return state


def run(
    scenario: Scenario,
    policy: Policy,
    horizon: int,
    stats: ChannelStats,
    seed: int,
    initial: Optional[Sequence[int]] = None,
    record_every: int = 1,
    run_id: Optional[str] = None,
) -> Trace:
    """Simulate ``horizon`` slots from an empty (or given) state.

    Args:
        scenario: Network and traffic.
        policy: Service policy.
        horizon: Number of slots.
        stats: Channel statistics of the scenario.
        seed: Seed of the run; identical inputs give identical traces. Traffic
            and random phases use separate streams spawned from it.
        initial: Optional initial flow count per location.
        record_every: Record every n-th slot (row 0 and the last slot are always kept).
        run_id: Run log to report to.

    Returns:
        Trace: The recorded sample path.
    """
    if horizon < 1:
        raise DomainError(f"Horizon must be at least one slot, got {horizon}")
    if record_every < 1:
        raise DomainError(f"record_every must be >= 1, got {record_every}")
    traffic_seq, phase_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(traffic_seq)
    phase_rng = np.random.default_rng(phase_seq)
    K = scenario.num_locations
    if initial is None:
        state = FlowState.empty(K)
    else:
        state = FlowState.from_counts(initial, scenario.mean_file_sizes, rng)

    record = sorted(set(range(0, horizon + 1, record_every)) | {horizon})
    rows = len(record)
    slots = np.array(record, dtype=np.int64)
    X = np.zeros((rows, K), dtype=np.int64)
    arrivals = np.zeros((rows, K), dtype=np.int64)
    departures = np.zeros((rows, K), dtype=np.int64)
    rates = np.zeros((rows, K))
    X[0] = state.counts

    total_arrivals = np.zeros(K, dtype=np.int64)
    total_departures = np.zeros(K, dtype=np.int64)
    row = 1
    for t in range(1, horizon + 1):
        step(state, policy, scenario, stats, rng, phase_rng)
        total_arrivals += state.last_arrivals
        total_departures += state.last_departures
        if row < rows and slots[row] == t:
            X[row] = state.counts
            arrivals[row] = total_arrivals
            departures[row] = total_departures
            rates[row] = state.last_rates
            row += 1

    msg = f"Simulated {horizon} slots under '{policy.kind}': {int(total_arrivals.sum())} arrivals, {int(total_departures.sum())} departures"
    logger.debug(f"🔁 {msg}")
    log_to_run_file(run_id, "simulating", msg)
    return Trace(
        slots=slots,
        X=X,
        arrivals=arrivals,
        departures=departures,
        rates=rates,
        seed=seed,
        scenario_hash=scenario.fingerprint(),
    )


def moving_average(trace: Trace, window: int) -> pd.DataFrame:
    """Sliding-window mean of every X_k and of their sum, indexed by slot.

    A window longer than the trace collapses to a single row holding the
    full-trace means.
    """
    if window < 1:
        raise DomainError(f"Window must be at least one slot, got {window}")
    frame = trace.to_frame().set_index('slot')
    stride = int(trace.slots[1] - trace.slots[0]) if len(trace.slots) > 1 else 1
    if window > trace.horizon:
        return frame.mean().to_frame().T.set_axis([trace.horizon])
    rows = max(1, window // stride)
    return frame.rolling(rows, min_periods=1).mean()


def stability_metric(trace: Trace, T: Optional[int] = None) -> float:
    """Time average of the total number of flows over the first T slots."""
    if trace.X.shape[0] == 0:
        raise DomainError("Empty trace")
    T = trace.horizon if T is None else T
    if T < 1 or T > trace.horizon:
        raise DomainError(f"T must lie in [1, {trace.horizon}], got {T}")
    mask = trace.slots < T
    return float(trace.X[mask].sum(axis=1).mean())


def trend_test(
    series: Union[pd.Series, np.ndarray],
    fraction: float = 0.5,
    threshold: float = 1e-3,
    z: float = 1.645,
) -> TrendResult:
    """Least-squares trend of the tail of a series.

    The tail is diverging when its slope exceeds ``threshold`` and stays
    positive ``z`` standard errors below the estimate.
    """
    if not 0 < fraction <= 1:
        raise DomainError(f"fraction must be in (0, 1], got {fraction}")
    if isinstance(series, pd.Series):
        x = series.index.to_numpy(dtype=float)
        y = series.to_numpy(dtype=float)
    else:
        y = np.asarray(series, dtype=float)
        x = np.arange(y.shape[0], dtype=float)
    n = math.ceil(fraction * y.shape[0])
    if n < 3:
        raise DomainError(f"Trend test needs at least 3 points in the tail, got {n}")
    x, y = x[-n:], y[-n:]
    if np.ptp(y) == 0:
        return TrendResult(slope=0.0, stderr=0.0, intercept=float(y[0]), diverging=False, n_points=n)
    fit = sps.linregress(x, y)
    diverging = bool(fit.slope > threshold and fit.slope - z * fit.stderr > 0)
    return TrendResult(
        slope=float(fit.slope),
        stderr=float(fit.stderr),
        intercept=float(fit.intercept),
        diverging=diverging,
        n_points=n,
    )


@dataclass(frozen=True)
class _RayJob:
    index: int
    direction: Tuple[float, ...]
    scenario: Scenario
    stats: ChannelStats
    policy: Policy
    horizon: int
    window: int
    threshold: float
    fraction: float
    tol: float
    scale_max: float
    seed: int


def _trial_unstable(job: _RayJob, scale: float, trial: int) -> bool:
    scenario = job.scenario.with_arrival_rates(scale * np.asarray(job.direction))
    trace = run(scenario, job.policy, job.horizon, job.stats, seed=derive_seed(job.seed, job.index, trial))
    series = moving_average(trace, min(job.window, job.horizon))['sum']
    return trend_test(series, job.fraction, job.threshold).diverging


def _bisect_ray(job: _RayJob) -> RegionPoint:
    trial = 0
    if not _trial_unstable(job, job.scale_max, trial):
        logger.warning(f"⚠️ Ray {job.direction} still stable at scale {job.scale_max:.4g}; marked unbounded")
        return RegionPoint(job.policy.kind, job.direction, job.scale_max, bracketed=False, trials=1)

    lo, hi = 0.0, job.scale_max
    while hi - lo > job.tol * job.scale_max:
        trial += 1
        mid = 0.5 * (lo + hi)
        if _trial_unstable(job, mid, trial):
            hi = mid
        else:
            lo = mid
    return RegionPoint(job.policy.kind, job.direction, 0.5 * (lo + hi), bracketed=True, trials=trial + 1)


def default_rays(num_locations: int, count: int = 5) -> List[List[float]]:
    """Evenly spaced angles of the first quadrant for two locations, the equal-rate diagonal otherwise."""
    if num_locations == 2:
        angles = np.linspace(0.0, 0.5 * math.pi, count)
        rays = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        rays[np.abs(rays) < 1e-12] = 0.0
        return rays.round(4).tolist()
    return [[1.0] * num_locations]


def default_scale_max(policy: Policy, scenario: Scenario, stats: ChannelStats, direction: np.ndarray) -> float:
    """1.5x the largest scale any single location could sustain along the direction."""
    mu = free_rates(policy, scenario, stats) / scenario.mean_file_sizes
    positive = direction > 0
    return 1.5 * float(np.min(mu[positive] / direction[positive]))


def estimate_region(
    scenario: Scenario,
    stats: ChannelStats,
    policy: Policy,
    rays: Sequence[Sequence[float]],
    horizon: int,
    threshold: float,
    seed: int,
    window: int = 250,
    fraction: float = 0.5,
    tol: float = 0.02,
    scale_max: Optional[float] = None,
    workers: int = 1,
    run_id: Optional[str] = None,
) -> List[RegionPoint]:
    """Stability boundary of a policy along rays in arrival-rate space.

    Each ray is bisected on the scale s of lambda = s * direction: a trial
    simulates ``horizon`` slots from empty and is unstable when the tail of the
    moving average trends upward. Trial seeds depend only on (ray, trial), so
    two policies run with the same seed see the same arrivals and the
    result does not depend on ``workers``.

    Returns:
        List of RegionPoint, one per ray, in input order.
    """
    if threshold <= 0:
        raise DomainError(f"Divergence threshold must be positive, got {threshold}")
    if not rays:
        logger.warning("⚠️ No rays given; the region estimate is empty")
        return []

    jobs = []
    for index, ray in enumerate(rays):
        direction = np.asarray(ray, dtype=float)
        if direction.shape != (scenario.num_locations,) or np.any(direction < 0) or not np.any(direction > 0):
            raise DomainError(f"Ray {list(ray)} is not a nonnegative direction in {scenario.num_locations} dimensions")
        direction = direction / np.linalg.norm(direction)
        s_max = scale_max or default_scale_max(policy, scenario, stats, direction)
        jobs.append(_RayJob(
            index=index,
            direction=tuple(float(d) for d in direction),
            scenario=scenario,
            stats=stats,
            policy=policy,
            horizon=horizon,
            window=window,
            threshold=threshold,
            fraction=fraction,
            tol=tol,
            scale_max=s_max,
            seed=seed,
        ))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_bisect_ray, jobs))
    else:
        points = [_bisect_ray(job) for job in jobs]

    for point in points:
        msg = f"Region '{point.policy}' along {tuple(round(d, 4) for d in point.direction)}: scale {point.scale:.4g}"
        logger.info(f"📐 {msg}")
        log_to_run_file(run_id, "simulating", msg)
    return points


def sweep_policies(
    scenario: Scenario,
    stats: ChannelStats,
    policies: Sequence[Policy],
    direction: Sequence[float],
    scales: Sequence[float],
    horizon: int,
    seed: int,
    window: int = 250,
    fraction: float = 0.5,
    threshold: float = 1e-3,
    run_id: Optional[str] = None,
) -> List[SweepPoint]:
    """Stability metric of every policy on a grid of loads lambda = scale * direction.

    All policies run on the same arrival sequence at a given scale.

    Returns:
        List of SweepPoint ordered by scale, then by policy in input order.
    """
    d = np.asarray(direction, dtype=float)
    if d.shape != (scenario.num_locations,) or np.any(d < 0) or not np.any(d > 0):
        raise DomainError(f"Direction {list(direction)} is not a nonnegative direction in {scenario.num_locations} dimensions")
    if any(s < 0 for s in scales):
        raise DomainError("Load scales cannot be negative")
    d = d / np.linalg.norm(d)

    points = []
    for i, scale in enumerate(scales):
        loaded = scenario.with_arrival_rates(scale * d)
        for policy in policies:
            trace = run(loaded, policy, horizon, stats, seed=derive_seed(seed, i))
            trend = trend_test(moving_average(trace, min(window, horizon))['sum'], fraction, threshold)
            points.append(SweepPoint(
                policy=policy.kind,
                scale=float(scale),
                arrival_rates=tuple(float(x) for x in loaded.arrival_rates),
                metric=stability_metric(trace),
                slope=trend.slope,
                diverging=trend.diverging,
            ))
        msg = f"Sweep at scale {scale:.4g}: " + ', '.join(
            f"{p.policy}={p.metric:.3g}{' (diverging)' if p.diverging else ''}" for p in points[-len(policies):]
        )
        logger.debug(f"📈 {msg}")
        log_to_run_file(run_id, "simulating", msg)
    return points


def first_unstable_scale(points: Sequence[SweepPoint], policy: str) -> float:
    """Smallest swept scale at which ``policy`` diverges, inf if it never does."""
    diverging = [p.scale for p in points if p.policy == policy and p.diverging]
    return min(diverging) if diverging else math.inf

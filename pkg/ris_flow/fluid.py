"""Fluid limit of the flow-level dynamics and Lyapunov drift checks.

Time is measured in slots and volumes in flows, so a fluid path is comparable
with X(beta t) / beta from the stochastic simulator.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from ris_flow.channel import ChannelStats, Scenario
from ris_flow.errors import DomainError, InvalidModelError, NumericError
from ris_flow.flowsim import Policy, run
from ris_flow.sinr import rate, sinr_vector
from utils import log_to_run_file

logger = logging.getLogger(__name__)

RateMap = Callable[[np.ndarray], np.ndarray]

MAX_FLUID_STEPS = 1_000_000


@dataclass(frozen=True)
class FluidState:
    Y: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if np.any(Y < 0):
            raise DomainError("Fluid volumes cannot be negative")
        object.__setattr__(self, 'Y', Y)

    @classmethod
    def normalized(cls, weights: Sequence[float]) -> 'FluidState':
        """Unit total mass split in proportion to ``weights``."""
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise DomainError("Initial weights must be nonnegative and not all zero")
        return cls(Y=w / w.sum())


@dataclass(frozen=True)
class FluidTrajectory:
    times: np.ndarray
    Y: np.ndarray
    slopes: np.ndarray
    rates: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def drain_time(self) -> float:
        """First sample time after which the total volume stays zero (inf if never)."""
        empty = self.Y.sum(axis=1) <= 0
        if not empty[-1]:
            return math.inf
        nonempty = np.flatnonzero(~empty)
        first = 0 if nonempty.size == 0 else nonempty[-1] + 1
        return float(self.times[first])

    def to_frame(self) -> pd.DataFrame:
        columns = {'t': self.times}
        for k in range(self.Y.shape[1]):
            columns[f'Y_{k + 1}'] = self.Y[:, k]
        columns['sum'] = self.Y.sum(axis=1)
        return pd.DataFrame(columns)


@dataclass(frozen=True)
class DriftReport:
    lyapunov_initial: float
    max_drift: float
    epsilon: float
    gamma: float
    xi: float
    bound_T: float
    drain_time: float
    stable: bool
    drains_in_time: bool
    samples: int
    values: np.ndarray
    drifts: np.ndarray

    def to_dict(self) -> dict:
        return {
            'lyapunov_initial': self.lyapunov_initial,
            'max_drift': self.max_drift,
            'epsilon': self.epsilon,
            'gamma': self.gamma,
            'xi': self.xi,
            'bound_T': self.bound_T,
            'drain_time': self.drain_time,
            'stable': self.stable,
            'drains_in_time': self.drains_in_time,
            'samples': self.samples,
        }


def make_rate_map(scenario: Scenario, stats: ChannelStats, eta: float, policy: str = 'optimized') -> RateMap:
    """Service rate of every location, in flows per slot, for an occupancy pattern.

    Each location's rate is the one it would get transmitting together with
    the occupied locations. Under ``tdma`` the interference-free rate is shared
    equally among the occupied locations.
    """
    if policy not in ('optimized', 'equal', 'tdma'):
        raise InvalidModelError(f"No fluid rate map for policy '{policy}'")
    K = scenario.num_locations
    bits = scenario.bandwidth_hz * scenario.slot_duration_s
    free = rate(
        sinr_vector(stats, eta, np.zeros(K), scenario.powers, scenario.noise_power),
        scenario.bandwidth_hz,
        scenario.slot_duration_s,
    ) / scenario.mean_file_sizes
    cache: Dict[bytes, np.ndarray] = {}

    def rate_map(active: np.ndarray) -> np.ndarray:
        active = np.asarray(active, dtype=bool)
        key = active.tobytes()
        if key not in cache:
            if policy == 'tdma':
                sharing = active.sum() + (~active).astype(float)
                cache[key] = free / sharing
            else:
                sinr = sinr_vector(stats, eta, active.astype(float), scenario.powers, scenario.noise_power)
                cache[key] = bits * np.log2(1.0 + sinr) / scenario.mean_file_sizes
        return cache[key]

    return rate_map


def fluid_integrate(
    Y0,
    lam,
    rate_map: RateMap,
    horizon: float,
    dt: float,
    max_steps: int = MAX_FLUID_STEPS,
) -> FluidTrajectory:
    """Explicit Euler integration of dY/dt = lambda - R(Y), clipped at zero.

    A drained location keeps Y = 0 unless its arrival rate exceeds the rate it
    would get.

    Raises:
        DomainError: If dt or the horizon is not positive.
        NumericError: If the horizon is not finite or needs more than ``max_steps`` steps.
    """
    if dt <= 0:
        raise DomainError(f"Step size must be positive, got {dt}")
    if horizon <= 0:
        raise DomainError(f"Horizon must be positive, got {horizon}")
    if not math.isfinite(horizon):
        raise NumericError("Fluid horizon is not finite; some service rate is zero")
    state = Y0 if isinstance(Y0, FluidState) else FluidState(Y=Y0)
    lam = np.asarray(lam, dtype=float)
    steps = int(math.ceil(horizon / dt - 1e-9))
    if steps > max_steps:
        raise NumericError(
            f"Fluid integration needs {steps} steps (horizon {horizon:.4g}, dt {dt:.4g}), budget is {max_steps}; "
            "raise fluid.max_steps or dt, or check for vanishing service rates"
        )
    K = state.Y.shape[0]

    times = state.t + dt * np.arange(steps + 1)
    Y = np.zeros((steps + 1, K))
    slopes = np.zeros((steps + 1, K))
    rates = np.zeros((steps + 1, K))
    Y[0] = state.Y
    for i in range(steps + 1):
        active = Y[i] > 0
        rates[i] = rate_map(active)
        drift = lam - rates[i]
        slopes[i] = np.where(active, drift, np.maximum(drift, 0.0))
        if i < steps:
            Y[i + 1] = np.maximum(Y[i] + dt * slopes[i], 0.0)
    return FluidTrajectory(times=times, Y=Y, slopes=slopes, rates=rates)


def lyapunov_weights(lam, gamma: float, epsilon: float) -> np.ndarray:
    z = gamma * np.asarray(lam, dtype=float) + epsilon
    if np.any(z <= 0):
        raise DomainError("Lyapunov weights need gamma * lambda_k + epsilon > 0 for every k")
    return 1.0 / -np.expm1(-z)


def lyapunov_value(Y, lam, gamma: float, epsilon: float) -> float:
    """Weighted quadratic sum(0.5 * w_k * Y_k^2), w_k = e^z / (e^z - 1), z = gamma * lambda_k + epsilon."""
    w = lyapunov_weights(lam, gamma, epsilon)
    Y = np.asarray(Y, dtype=float)
    return float(0.5 * np.sum(w * Y ** 2))


def drift_check(
    trajectory: FluidTrajectory,
    lam,
    gamma: float,
    epsilon: float,
    slack: Optional[float] = None,
    run_id: Optional[str] = None,
) -> DriftReport:
    """Lyapunov drift along a fluid trajectory and the resulting drain-time bound.

    The drift is evaluated exactly along the integrated path,
    dL/dt = sum(w_k Y_k dY_k/dt). xi is the smallest observed -dL/dt / sqrt(L);
    with unit initial mass the bound is T = (2 / xi) sqrt(sum(0.5 * w_k)),
    scaled by the total initial mass otherwise.

    Raises:
        DomainError: If the trajectory has fewer than two samples.
    """
    if trajectory.times.shape[0] < 2:
        raise DomainError("Trajectory too short to estimate drift")
    w = lyapunov_weights(lam, gamma, epsilon)
    slack = 5.0 * trajectory.dt if slack is None else slack
    values = 0.5 * np.sum(w * trajectory.Y ** 2, axis=1)
    drifts = np.sum(w * trajectory.Y * trajectory.slopes, axis=1)
    positive = values > 0

    if not positive.any():
        return DriftReport(
            lyapunov_initial=0.0, max_drift=0.0, epsilon=epsilon, gamma=gamma, xi=math.inf,
            bound_T=0.0, drain_time=float(trajectory.times[0]), stable=True, drains_in_time=True,
            samples=0, values=values, drifts=drifts,
        )

    max_drift = float(drifts[positive].max())
    xi = float(np.min(-drifts[positive] / np.sqrt(values[positive])))
    stable = bool(max_drift < 0)
    mass = float(trajectory.Y[0].sum())
    bound_T = (2.0 / xi) * math.sqrt(float(np.sum(0.5 * w))) * mass if stable else math.inf
    drain_time = trajectory.drain_time()
    drains_in_time = bool(stable and drain_time <= bound_T + slack)

    msg = f"Drift check: max dL/dt={max_drift:.4g}, xi={xi:.4g}, T={bound_T:.4g}, drained at {drain_time:.4g}"
    logger.info(f"{'✅' if stable else '⚠️'} {msg}")
    log_to_run_file(run_id, "metrics", msg)
    return DriftReport(
        lyapunov_initial=float(values[0]), max_drift=max_drift, epsilon=epsilon, gamma=gamma, xi=xi,
        bound_T=bound_T, drain_time=drain_time, stable=stable, drains_in_time=drains_in_time,
        samples=int(positive.sum()), values=values, drifts=drifts,
    )


def log_gain_check(gamma: float, x: float) -> bool:
    """log(1 + gamma x) >= gamma log(1 + x) for gamma in (0, 1], x > 0."""
    if not 0 < gamma <= 1:
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}")
    if x <= 0:
        raise DomainError(f"x must be positive, got {x}")
    lhs = math.log1p(gamma * x)
    rhs = gamma * math.log1p(x)
    return lhs >= rhs - 1e-12 * max(abs(rhs), 1.0)


def log_gain_sweep(n: int, rng: np.random.Generator) -> int:
    """Number of violations over ``n`` random (gamma, x) pairs, x log-uniform in [1e-3, 1e3]."""
    gamma = 1.0 - rng.random(n)
    x = 10.0 ** rng.uniform(-3.0, 3.0, n)
    lhs = np.log1p(gamma * x)
    rhs = gamma * np.log1p(x)
    return int(np.sum(lhs < rhs - 1e-12 * np.maximum(np.abs(rhs), 1.0)))


def fluid_boundary(
    rate_map: RateMap,
    direction: Sequence[float],
    scale_max: float,
    horizon: float,
    dt: float,
    tol: float = 1e-3,
) -> float:
    """Largest scale s such that the fluid with lambda = s * direction drains from unit mass.

    ``direction`` is normalized to unit length; a scale that still drains at
    ``scale_max`` is returned as ``scale_max``.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    Y0 = FluidState.normalized(d)

    def drains(scale: float) -> bool:
        path = fluid_integrate(Y0, scale * d, rate_map, horizon, dt)
        return path.drain_time() <= horizon

    if drains(scale_max):
        return scale_max
    lo, hi = 0.0, scale_max
    while hi - lo > tol * scale_max:
        mid = 0.5 * (lo + hi)
        if drains(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def select_epsilon(lam, gamma: float, boundary_scale: float, direction: Sequence[float]) -> float:
    """epsilon = 0.5 (boundary_scale - gamma ||lambda||) min_k d_k over the positive components of d.

    Raises:
        DomainError: If gamma * lambda is not strictly inside the boundary.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    margin = boundary_scale - gamma * float(np.linalg.norm(np.asarray(lam, dtype=float)))
    epsilon = 0.5 * margin * float(d[d > 0].min())
    if epsilon <= 0:
        raise DomainError(f"gamma * lambda lies outside the boundary (margin {margin:.4g})")
    return epsilon


def scaled_path_gap(
    scenario: Scenario,
    stats: ChannelStats,
    policy: Policy,
    Y0: Sequence[float],
    beta: int,
    horizon: float,
    seed: int,
) -> float:
    """Sup-norm distance between X(beta t) / beta from the simulator and the fluid path Y(t).

    The simulator starts from round(beta * Y0) flows and runs beta * horizon
    slots; the fluid path uses step 1 / beta so both share one time grid.
    """
    if beta < 1:
        raise DomainError(f"Scaling factor must be >= 1, got {beta}")
    Y0 = np.asarray(Y0, dtype=float)
    rate_map = make_rate_map(scenario, stats, policy.eta, policy.kind)
    path = fluid_integrate(Y0, scenario.arrival_rates, rate_map, horizon, 1.0 / beta)
    slots = path.times.shape[0] - 1
    trace = run(scenario, policy, slots, stats, seed=seed, initial=np.rint(beta * Y0).astype(int))
    scaled = trace.X / beta
    return float(np.max(np.abs(scaled - path.Y[trace.slots])))

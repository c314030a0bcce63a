import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ris_flow.channel import ChannelStats, sample_realizations
from ris_flow.errors import DomainError, InvalidDimensionError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PhaseConfig:
    """RIS phase shifts theta in [0, 2pi)."""
    theta: np.ndarray

    def __post_init__(self):
        theta = np.mod(np.asarray(self.theta, dtype=float).ravel(), TWO_PI)
        # mod of a tiny negative angle rounds up to 2pi
        theta = np.where(theta >= TWO_PI, 0.0, theta)
        object.__setattr__(self, 'theta', theta)

    @classmethod
    def from_phi(cls, phi: np.ndarray) -> 'PhaseConfig':
        return cls(theta=np.angle(np.asarray(phi)))

    @property
    def phi(self) -> np.ndarray:
        return np.exp(1j * self.theta)

    @property
    def num_elements(self) -> int:
        return self.theta.shape[0]


@dataclass(frozen=True)
class SinrInputs:
    """Everything the closed-form SINR of one location depends on."""
    stats: ChannelStats
    eta: float
    active: Sequence[int]
    powers: np.ndarray
    noise_power: float

    def weights(self) -> np.ndarray:
        w = np.zeros(self.stats.num_locations)
        w[list(self.active)] = 1.0
        return w


@dataclass(frozen=True)
class SinrTerms:
    """Monte-Carlo moments of the combined uplink signal of one location.

    ``signal`` is |E||u_k||^2|^2, ``uncertainty`` is Var ||u_k||^2,
    ``interference[j]`` is E|u_k^H u_j|^2 (zero outside the active set and at k),
    ``noise`` is sigma^2 E||u_k||^2. Transmit powers are applied in ``sinr``.
    """
    k: int
    signal: float
    uncertainty: float
    interference: np.ndarray
    noise: float
    sinr: float
    n_samples: int


def _check_dimensions(phase: PhaseConfig, stats: ChannelStats) -> None:
    if phase.num_elements != stats.num_elements:
        raise InvalidDimensionError(
            f"Phase vector has {phase.num_elements} elements, channel has {stats.num_elements}"
        )


def eta(phase: PhaseConfig, stats: ChannelStats) -> float:
    """phi^H R phi, the scalar through which the phases enter every SINR."""
    _check_dimensions(phase, stats)
    phi = phase.phi
    value = float(np.real(phi.conj() @ stats.R @ phi))
    return max(value, 0.0)


def eta_trace(phase: PhaseConfig, stats: ChannelStats) -> float:
    """tr(Theta^H R_t Theta R_r), equal to ``eta`` by the Hadamard identity."""
    _check_dimensions(phase, stats)
    phi = phase.phi
    rotated = (phi.conj()[:, None] * stats.R_t) * phi[None, :]
    return float(np.real(np.trace(rotated @ stats.R_r)))


def eta_spread(phase: PhaseConfig, stats: ChannelStats) -> float:
    """tr((Theta^H R_t Theta R_r)^2).

    Sets the finite-M gap between the exact moments and the closed form; for an
    uncorrelated RIS it equals M, so eta_spread / eta^2 = 1 / M.
    """
    _check_dimensions(phase, stats)
    phi = phase.phi
    product = ((phi.conj()[:, None] * stats.R_t) * phi[None, :]) @ stats.R_r
    return max(float(np.real(np.trace(product @ product))), 0.0)


def sinr_vector(stats: ChannelStats, eta_value: float, weights, powers, noise_power: float) -> np.ndarray:
    """SINR every location would get when transmitting next to the weighted active set.

    Args:
        stats: Channel statistics.
        eta_value: phi^H R phi of the phase configuration in use.
        weights: Per-location transmitter counts; a location with weight 0 is
            counted once as its own transmitter.
        powers: Per-location transmit powers (W).
        noise_power: Noise power (W).

    Returns:
        np.ndarray: Length-K vector of SINRs.
    """
    if eta_value < 0:
        raise DomainError(f"eta must be nonnegative, got {eta_value}")
    weights = np.asarray(weights, dtype=float)
    powers = np.asarray(powers, dtype=float)
    a = stats.alpha_user
    s1 = float(np.sum(stats.alpha_ap))
    s2 = float(np.sum(stats.alpha_ap ** 2))

    load = a * powers
    interference = np.dot(weights, load) + np.maximum(1.0 - weights, 0.0) * load
    numerator = a * s1 ** 2 * eta_value * powers
    return numerator / (s2 * eta_value * interference + noise_power * s1)


def sinr_closed_form(k: int, inputs: SinrInputs) -> float:
    """Closed-form effective SINR of location ``k`` (use-and-then-forget bound).

    Raises:
        DomainError: If eta is negative or k is not transmitting.
    """
    if inputs.eta < 0:
        raise DomainError(f"eta must be nonnegative, got {inputs.eta}")
    if k not in set(inputs.active):
        raise DomainError(f"Location {k} is not in the active set {sorted(inputs.active)}")
    values = sinr_vector(inputs.stats, inputs.eta, inputs.weights(), inputs.powers, inputs.noise_power)
    return float(values[k])


def sample_sinr_terms(
    k: int,
    inputs: SinrInputs,
    phase: PhaseConfig,
    n_samples: int,
    rng: np.random.Generator,
    batch_size: int = 500,
) -> SinrTerms:
    """Estimate the desired-signal, uncertainty, interference and noise terms by sampling.

    Combining uses the perfectly known aggregated channel u_k of location k.

    Args:
        k: Location of interest, must be active.
        inputs: SINR inputs; ``inputs.eta`` is not used.
        phase: RIS configuration applied to every sample.
        n_samples: Number of channel blocks.
        rng: Random generator.
        batch_size: Blocks drawn per batch.

    Returns:
        SinrTerms: The moments and the resulting SINR.
    """
    if n_samples < 1:
        raise DomainError("Monte-Carlo estimation needs at least one sample")
    if k not in set(inputs.active):
        raise DomainError(f"Location {k} is not in the active set {sorted(inputs.active)}")
    _check_dimensions(phase, inputs.stats)
    if n_samples < 1000:
        logger.warning(f"⚠️ Only {n_samples} channel samples; moment estimates will be noisy")

    phi = phase.phi
    K = inputs.stats.num_locations
    norm_sum = 0.0
    norm_sq_sum = 0.0
    cross_sum = np.zeros(K)
    done = 0
    while done < n_samples:
        b = min(batch_size, n_samples - done)
        g, h = sample_realizations(inputs.stats, rng, b)
        # u[b, n, j] = h_n^H Theta g_j
        u = np.einsum('bnm,m,bjm->bnj', h.conj(), phi, g)
        norms = np.sum(np.abs(u[:, :, k]) ** 2, axis=1)
        cross = np.abs(np.einsum('bn,bnj->bj', u[:, :, k].conj(), u)) ** 2
        norm_sum += norms.sum()
        norm_sq_sum += (norms ** 2).sum()
        cross_sum += cross.sum(axis=0)
        done += b

    mean_norm = norm_sum / n_samples
    variance = max(norm_sq_sum / n_samples - mean_norm ** 2, 0.0)
    return _assemble_terms(k, inputs, mean_norm, variance, cross_sum / n_samples, n_samples)


def _assemble_terms(
    k: int,
    inputs: SinrInputs,
    mean_norm: float,
    variance: float,
    cross: np.ndarray,
    n_samples: int,
) -> SinrTerms:
    K = inputs.stats.num_locations
    mask = np.zeros(K, dtype=bool)
    mask[list(inputs.active)] = True
    mask[k] = False
    interference = np.where(mask, cross, 0.0)

    powers = np.asarray(inputs.powers, dtype=float)
    signal = mean_norm ** 2
    noise = inputs.noise_power * mean_norm
    sinr = powers[k] * signal / (np.dot(powers, interference) + powers[k] * variance + noise)
    return SinrTerms(
        k=k,
        signal=float(signal),
        uncertainty=float(variance),
        interference=interference,
        noise=float(noise),
        sinr=float(sinr),
        n_samples=n_samples,
    )


def sinr_terms_exact(k: int, inputs: SinrInputs, phase: PhaseConfig) -> SinrTerms:
    """Exact finite-M moments of the terms that ``sample_sinr_terms`` estimates.

    With eta = tr(Theta^H R_t Theta R_r), tau = ``eta_spread`` and S1, S2 the sum
    and sum of squares of the AP gains:

        E||u_k||^2       = a_k S1 eta
        Var ||u_k||^2    = a_k^2 (S2 (eta^2 + tau) + S1^2 tau)
        E|u_k^H u_j|^2   = a_k a_j (S2 eta^2 + S1^2 tau)

    The closed form keeps only the S2 eta^2 parts, so it overestimates the
    SINR by a relative amount of order tau / eta^2, which is 1 / M for an
    uncorrelated RIS. ``inputs.eta`` is not used; eta comes from ``phase``.

    Raises:
        DomainError: If k is not transmitting.
    """
    if k not in set(inputs.active):
        raise DomainError(f"Location {k} is not in the active set {sorted(inputs.active)}")
    stats = inputs.stats
    eta_value = eta(phase, stats)
    tau = eta_spread(phase, stats)
    a = stats.alpha_user
    s1 = float(np.sum(stats.alpha_ap))
    s2 = float(np.sum(stats.alpha_ap ** 2))

    mean_norm = a[k] * s1 * eta_value
    variance = a[k] ** 2 * (s2 * (eta_value ** 2 + tau) + s1 ** 2 * tau)
    cross = a[k] * a * (s2 * eta_value ** 2 + s1 ** 2 * tau)
    return _assemble_terms(k, inputs, mean_norm, variance, cross, 0)


def sinr_exact(k: int, inputs: SinrInputs, phase: PhaseConfig) -> float:
    return sinr_terms_exact(k, inputs, phase).sinr


def sinr_monte_carlo(
    k: int,
    inputs: SinrInputs,
    phase: PhaseConfig,
    n_samples: int,
    rng: np.random.Generator,
    batch_size: int = 500,
) -> float:
    """Monte-Carlo estimate of the effective SINR of location ``k``."""
    return sample_sinr_terms(k, inputs, phase, n_samples, rng, batch_size).sinr


def rate(sinr, bandwidth: float, slot: float):
    """Bits delivered in one slot at the given SINR.

    Raises:
        DomainError: If any SINR is negative.
    """
    values = np.asarray(sinr, dtype=float)
    if np.any(values < 0):
        raise DomainError("SINR cannot be negative")
    bits = bandwidth * slot * np.log2(1.0 + values)
    return float(bits) if np.ndim(bits) == 0 else bits


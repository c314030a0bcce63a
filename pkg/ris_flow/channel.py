import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Tuple

import numpy as np
from scipy import linalg

from ris_flow.errors import (
    DegenerateGeometryError,
    DomainError,
    InvalidDimensionError,
    InvalidModelError,
    NumericError,
)

logger = logging.getLogger(__name__)

# Smallest distance (km) treated as a distinct point
COINCIDENCE_KM = 1e-9


@dataclass(frozen=True)
class PathlossParams:
    """Constants of the three-slope large-scale fading model."""
    frequency_mhz: float = 1900.0
    ap_height_m: float = 15.0
    user_height_m: float = 1.65
    d0_km: float = 0.01
    d1_km: float = 0.05
    shadow_std_db: float = 0.0

    @property
    def fixed_loss_db(self) -> float:
        log_f = math.log10(self.frequency_mhz)
        return (
            46.3
            + 33.9 * log_f
            - 13.82 * math.log10(self.ap_height_m)
            - (1.1 * log_f - 0.7) * self.user_height_m
            + (1.56 * log_f - 0.8)
        )


@dataclass(frozen=True)
class CorrelationModel:
    """Spatial correlation at the RIS, one coefficient per side."""
    kind: Literal['exponential', 'isotropic', 'identity'] = 'identity'
    rho_t: complex = 0j
    rho_r: complex = 0j
    spacing_wavelengths: float = 0.5

    @property
    def symmetric(self) -> bool:
        """True when the transmit and receive side correlations coincide."""
        return self.kind != 'exponential' or self.rho_t == self.rho_r

    def validate(self) -> None:
        if self.kind not in ('exponential', 'isotropic', 'identity'):
            raise InvalidModelError(f"Unknown correlation model: {self.kind}")
        if self.kind == 'exponential' and (abs(self.rho_t) > 1.0 or abs(self.rho_r) > 1.0):
            raise InvalidModelError(f"Exponential correlation needs |rho| <= 1, got {self.rho_t} and {self.rho_r}")
        if self.kind == 'isotropic' and self.spacing_wavelengths <= 0:
            raise InvalidModelError(f"Element spacing must be positive, got {self.spacing_wavelengths}")


@dataclass(frozen=True)
class Scenario:
    """Geometry, radio and traffic parameters of one network.

    Positions are in km, powers in W, sizes in bits and rates in flows per slot.
    """
    ap_positions: np.ndarray
    ris_position: np.ndarray
    location_positions: np.ndarray
    ris_elements: int
    bandwidth_hz: float
    noise_power: float
    powers: np.ndarray
    mean_file_sizes: np.ndarray
    arrival_rates: np.ndarray
    slot_duration_s: float
    area_half_width_km: float = 1.0
    carrier_frequency_ghz: float = 1.9
    seed: int = 0
    pathloss: PathlossParams = field(default_factory=PathlossParams)
    name: str = 'scenario'

    def __post_init__(self):
        for name in ('ap_positions', 'ris_position', 'location_positions', 'powers', 'mean_file_sizes', 'arrival_rates'):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.ap_positions.ndim != 2 or self.ap_positions.shape[0] < 1:
            raise InvalidDimensionError("A scenario needs at least one AP")
        if self.location_positions.ndim != 2 or self.location_positions.shape[0] < 1:
            raise InvalidDimensionError("A scenario needs at least one location")
        if self.ris_elements < 1:
            raise InvalidDimensionError(f"RIS element count must be >= 1, got {self.ris_elements}")
        k = self.num_locations
        for name in ('powers', 'mean_file_sizes', 'arrival_rates'):
            if getattr(self, name).shape != (k,):
                raise InvalidDimensionError(f"{name} must have one entry per location ({k})")
        if np.any(self.powers <= 0) or self.noise_power <= 0:
            raise DomainError("Transmit and noise powers must be positive")
        if np.any(self.mean_file_sizes <= 0) or np.any(self.arrival_rates < 0):
            raise DomainError("File sizes must be positive and arrival rates nonnegative")
        if self.bandwidth_hz <= 0 or self.slot_duration_s <= 0:
            raise DomainError("Bandwidth and slot duration must be positive")
        points = np.vstack([self.ap_positions, self.location_positions, self.ris_position[None, :]])
        if np.any(np.abs(points) > self.area_half_width_km + 1e-12):
            raise DomainError(f"All positions must lie inside the {2 * self.area_half_width_km:g} km square")

    @property
    def num_aps(self) -> int:
        return self.ap_positions.shape[0]

    @property
    def num_locations(self) -> int:
        return self.location_positions.shape[0]

    def with_arrival_rates(self, rates) -> 'Scenario':
        return replace(self, arrival_rates=np.broadcast_to(np.asarray(rates, dtype=float), (self.num_locations,)).copy())

    def fingerprint(self) -> str:
        payload = {
            'aps': self.ap_positions.round(12).tolist(),
            'ris': self.ris_position.round(12).tolist(),
            'locations': self.location_positions.round(12).tolist(),
            'M': self.ris_elements,
            'bandwidth': self.bandwidth_hz,
            'noise': self.noise_power,
            'powers': self.powers.tolist(),
            'sizes': self.mean_file_sizes.tolist(),
            'rates': self.arrival_rates.tolist(),
            'slot': self.slot_duration_s,
            'seed': self.seed,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class ChannelStats:
    """Second-order description of the cascaded user-RIS-AP channel."""
    alpha_user: np.ndarray
    alpha_ap: np.ndarray
    R_t: np.ndarray
    R_r: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'alpha_user', np.asarray(self.alpha_user, dtype=float))
        object.__setattr__(self, 'alpha_ap', np.asarray(self.alpha_ap, dtype=float))
        if np.any(self.alpha_user <= 0) or np.any(self.alpha_ap <= 0):
            raise DomainError("Large-scale gains must be positive")
        m = self.R.shape[0]
        if self.R.shape != (m, m) or self.R_t.shape != (m, m) or self.R_r.shape != (m, m):
            raise InvalidDimensionError("Correlation matrices must be square and of equal size")

    @classmethod
    def from_correlations(cls, alpha_user, alpha_ap, R_t: np.ndarray, R_r: Optional[np.ndarray] = None) -> 'ChannelStats':
        R_r = R_t if R_r is None else R_r
        return cls(alpha_user=alpha_user, alpha_ap=alpha_ap, R_t=R_t, R_r=R_r, R=R_t * R_r.T)

    @property
    def num_elements(self) -> int:
        return self.R.shape[0]

    @property
    def num_locations(self) -> int:
        return self.alpha_user.shape[0]

    @property
    def num_aps(self) -> int:
        return self.alpha_ap.shape[0]

    @property
    def symmetric(self) -> bool:
        return bool(np.allclose(self.R_t, self.R_r, rtol=0.0, atol=1e-12))


@dataclass(frozen=True)
class ChannelRealization:
    """One block of small-scale fading: g is K x M (user to RIS), h is N x M (RIS to AP)."""
    g: np.ndarray
    h: np.ndarray


def _hermitize(matrix: np.ndarray) -> np.ndarray:
    matrix = 0.5 * (matrix + matrix.conj().T)
    np.fill_diagonal(matrix, 1.0)
    return matrix


def _exponential_correlation(rho: complex, M: int) -> np.ndarray:
    powers = np.concatenate(([1.0 + 0j], np.cumprod(np.full(M - 1, complex(rho)))))
    return linalg.toeplitz(np.conj(powers), powers)


def _isotropic_correlation(spacing: float, M: int) -> np.ndarray:
    # Elements on a square planar grid, row by row
    columns = math.ceil(math.sqrt(M))
    index = np.arange(M)
    coords = np.stack([index % columns, index // columns], axis=1) * spacing
    distance = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    return np.sinc(2.0 * distance).astype(complex)


def build_correlation(model: CorrelationModel, M: int, side: Literal['t', 'r'] = 't') -> np.ndarray:
    """Build the M x M correlation matrix of one side of the RIS.

    Args:
        model: The correlation model.
        M: Number of RIS elements.
        side: 't' for the RIS-to-AP side, 'r' for the user-to-RIS side.

    Returns:
        np.ndarray: Hermitian matrix with unit diagonal.

    Raises:
        InvalidModelError: If the model parameters are out of range.
        InvalidDimensionError: If M < 1.
    """
    if M < 1:
        raise InvalidDimensionError(f"RIS element count must be >= 1, got {M}")
    model.validate()

    if model.kind == 'identity':
        return np.eye(M, dtype=complex)
    if model.kind == 'isotropic':
        return _hermitize(_isotropic_correlation(model.spacing_wavelengths, M))
    rho = model.rho_t if side == 't' else model.rho_r
    return _hermitize(_exponential_correlation(rho, M))


def three_slope_pathloss(distance, params: Optional[PathlossParams] = None):
    """Linear large-scale gain of the three-slope model.

    Args:
        distance: Distance(s) in km, scalar or array.
        params: Model constants, defaults when omitted.

    Returns:
        Gain(s) with the shape of ``distance``.

    Raises:
        DomainError: If any distance is not positive.
    """
    params = params or PathlossParams()
    d = np.asarray(distance, dtype=float)
    if np.any(d <= 0):
        raise DomainError("Path loss needs strictly positive distances")

    loss = params.fixed_loss_db
    far = -loss - 35.0 * np.log10(d)
    middle = -loss - 15.0 * np.log10(params.d1_km) - 20.0 * np.log10(d)
    near = -loss - 15.0 * np.log10(params.d1_km) - 20.0 * np.log10(params.d0_km)
    gain_db = np.where(d > params.d1_km, far, np.where(d > params.d0_km, middle, near))

    gain = np.power(10.0, gain_db / 10.0)
    return float(gain) if np.ndim(gain) == 0 else gain


def uniform_subregion(count: int, lower, upper, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` points uniformly in the rectangle [lower, upper]."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return lower + (upper - lower) * rng.random((count, 2))


def grid_locations(count: int, lower, upper) -> np.ndarray:
    """Square mesh of ``count`` points spanning [lower, upper].

    Raises:
        InvalidDimensionError: If count is not a perfect square.
    """
    side = math.isqrt(count)
    if side * side != count:
        raise InvalidDimensionError(f"Grid layout needs a square number of locations, got {count}")
    xs = np.linspace(lower[0], upper[0], side)
    ys = np.linspace(lower[1], upper[1], side)
    xx, yy = np.meshgrid(xs, ys)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def build_stats(scenario: Scenario, model: CorrelationModel, rng: Optional[np.random.Generator] = None) -> ChannelStats:
    """Large-scale gains and correlation matrices for a scenario.

    Args:
        scenario: The network.
        model: RIS correlation model.
        rng: Only used when log-normal shadowing is switched on.

    Returns:
        ChannelStats: Gains from the RIS distances and R = R_t o R_r^T.

    Raises:
        DegenerateGeometryError: If a location or AP sits on the RIS.
    """
    user_distance = np.linalg.norm(scenario.location_positions - scenario.ris_position, axis=1)
    ap_distance = np.linalg.norm(scenario.ap_positions - scenario.ris_position, axis=1)
    if np.any(user_distance < COINCIDENCE_KM) or np.any(ap_distance < COINCIDENCE_KM):
        raise DegenerateGeometryError("A location or AP coincides with the RIS position")

    alpha_user = np.atleast_1d(three_slope_pathloss(user_distance, scenario.pathloss))
    alpha_ap = np.atleast_1d(three_slope_pathloss(ap_distance, scenario.pathloss))

    shadow = scenario.pathloss.shadow_std_db
    if shadow > 0:
        rng = rng if rng is not None else np.random.default_rng(scenario.seed)
        alpha_user = alpha_user * 10 ** (shadow * rng.standard_normal(alpha_user.shape) / 10)
        alpha_ap = alpha_ap * 10 ** (shadow * rng.standard_normal(alpha_ap.shape) / 10)

    M = scenario.ris_elements
    R_t = build_correlation(model, M, 't')
    R_r = build_correlation(model, M, 'r')
    logger.debug(f"📡 Built channel statistics: K={scenario.num_locations}, N={scenario.num_aps}, M={M}, model={model.kind}")
    return ChannelStats(alpha_user=alpha_user, alpha_ap=alpha_ap, R_t=R_t, R_r=R_r, R=R_t * R_r.T)


def covariance_factor(C: np.ndarray) -> np.ndarray:
    """Square-root factor F with F F^H = C.

    Cholesky first; semi-definite matrices fall back to an eigendecomposition
    with tiny eigenvalues clipped to zero.

    Raises:
        NumericError: If C has a clearly negative eigenvalue.
    """
    try:
        return linalg.cholesky(C, lower=True)
    except linalg.LinAlgError:
        pass

    w, V = linalg.eigh(0.5 * (C + C.conj().T))
    scale = max(float(np.max(np.abs(w))), 1.0)
    if w.min() < -1e-6 * scale:
        raise NumericError(f"Covariance is not positive semi-definite (min eigenvalue {w.min():.3e})")
    w = np.where(w < 1e-12, 0.0, w)
    return V * np.sqrt(w)


def _complex_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    z = rng.standard_normal(shape + (2,))
    return (z[..., 0] + 1j * z[..., 1]) / np.sqrt(2.0)


def sample_realizations(stats: ChannelStats, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` independent channel blocks.

    Returns:
        Tuple of g with shape (n, K, M), covariance alpha_user[k] R_r per row,
        and h with shape (n, N, M), covariance alpha_ap[n] R_t per row.
    """
    M = stats.num_elements
    F_r = covariance_factor(stats.R_r)
    F_t = covariance_factor(stats.R_t)
    g = _complex_normal(rng, (n, stats.num_locations, M)) @ F_r.T
    h = _complex_normal(rng, (n, stats.num_aps, M)) @ F_t.T
    g *= np.sqrt(stats.alpha_user)[None, :, None]
    h *= np.sqrt(stats.alpha_ap)[None, :, None]
    return g, h


def sample_realization(stats: ChannelStats, rng: np.random.Generator) -> ChannelRealization:
    g, h = sample_realizations(stats, rng, 1)
    return ChannelRealization(g=g[0], h=h[0])

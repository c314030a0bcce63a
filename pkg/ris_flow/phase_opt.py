import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from ris_flow.errors import BudgetExceededError, DomainError, InvalidDimensionError, NumericError
from ris_flow.sinr import TWO_PI, PhaseConfig
from utils import log_to_run_file, retry_until_converged

logger = logging.getLogger(__name__)

ENUMERATION_BUDGET = 2 ** 24
SCORE_CHUNK = 65536


@dataclass(frozen=True)
class PhaseOptions:
    n_rand: int = 1000
    tol: float = 1e-8
    max_iter: int = 5000
    rank: Optional[int] = None
    levels: int = 4
    retries: int = 3


@dataclass(frozen=True)
class SdpSolution:
    """Solution of max tr(R Phi) s.t. Phi >= 0, diag(Phi) = 1."""
    phi_matrix: np.ndarray
    factor: np.ndarray
    objective: float
    dual_bound: float
    iterations: int
    converged: bool
    relative_change: float

    @property
    def rank(self) -> int:
        return self.factor.shape[1]


@dataclass(frozen=True)
class PhaseSolution:
    phase: PhaseConfig
    eta_achieved: float
    sdp_upper: float
    gamma_certified: float
    mode: str
    levels: Optional[int] = None
    sdp: Optional[SdpSolution] = None

    def to_dict(self) -> dict:
        payload = {
            'theta': [float(t) for t in self.phase.theta],
            'eta': self.eta_achieved,
            'sdp_upper': self.sdp_upper,
            'gamma_certified': self.gamma_certified,
            'mode': self.mode,
            'levels': self.levels,
        }
        if self.sdp is not None:
            payload['solver'] = {
                'objective': self.sdp.objective,
                'dual_bound': self.sdp.dual_bound,
                'iterations': self.sdp.iterations,
                'converged': self.sdp.converged,
                'rank': self.sdp.rank,
            }
        return payload


def quadratic_value(R: np.ndarray, phi: np.ndarray) -> float:
    """phi^H R phi for a single vector."""
    return float(np.real(np.vdot(phi, R @ phi)))


def _batch_values(R: np.ndarray, phis: np.ndarray) -> np.ndarray:
    # rows of phis are candidate vectors
    return np.real(np.sum(phis.conj() * (phis @ R.T), axis=1))


def _check_hermitian(R: np.ndarray) -> None:
    if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] < 1:
        raise InvalidDimensionError(f"Expected a square matrix, got shape {R.shape}")
    scale = max(float(np.max(np.abs(R))), 1.0)
    if np.max(np.abs(R - R.conj().T)) > 1e-9 * scale:
        raise DomainError("Phase design needs a Hermitian matrix")


def dual_upper_bound(R: np.ndarray, phi_matrix: np.ndarray) -> float:
    """Certified upper bound on the relaxation optimum from any feasible Phi.

    With y_i = Re (R Phi)_ii and S = Diag(y) - R, the shifted vector
    y - lambda_min(S) is dual feasible, so sum(y) - M lambda_min(S) bounds
    every tr(R Phi) and hence every phi^H R phi.
    """
    M = R.shape[0]
    y = np.real(np.einsum('ij,ji->i', R, phi_matrix))
    S = np.diag(y) - R
    lam_min = float(linalg.eigvalsh(0.5 * (S + S.conj().T), subset_by_index=[0, 0])[0])
    return float(np.sum(y) - M * lam_min)


def _normalize_rows(V: np.ndarray, previous: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    safe = norms[:, 0] > 1e-300
    out = previous.copy()
    out[safe] = V[safe] / norms[safe]
    return out


def _solve_sdp_attempt(R: np.ndarray, options: PhaseOptions, rng: np.random.Generator, run_id: Optional[str] = None) -> SdpSolution:
    M = R.shape[0]
    p = options.rank or math.ceil(math.sqrt(2 * M)) + 1
    p = min(p, M)

    z = rng.standard_normal((M, p, 2))
    V = _normalize_rows(z[..., 0] + 1j * z[..., 1], np.ones((M, p), dtype=complex) / math.sqrt(p))
    # Shifted matrix keeps every row update away from zero; same maximizer on the feasible set
    shift = 1e-3 * max(float(np.max(np.real(np.diag(R)))), 1.0)
    RV = R @ V
    objective = float(np.real(np.vdot(V, RV)))
    change = np.inf
    converged = False
    iterations = 0
    for iterations in range(1, options.max_iter + 1):
        V = _normalize_rows(RV + shift * V, V)
        RV = R @ V
        updated = float(np.real(np.vdot(V, RV)))
        change = abs(updated - objective) / max(abs(updated), 1.0)
        objective = updated
        if change < options.tol:
            converged = True
            break

    phi_matrix = V @ V.conj().T
    bound = dual_upper_bound(R, phi_matrix)
    logger.debug(
        f"🧮 SDP rank {p}: objective {objective:.6g}, dual bound {bound:.6g}, "
        f"{iterations} iterations, converged={converged}"
    )
    return SdpSolution(
        phi_matrix=phi_matrix,
        factor=V,
        objective=objective,
        dual_bound=bound,
        iterations=iterations,
        converged=converged,
        relative_change=float(change),
    )


def solve_sdp(
    R: np.ndarray,
    options: Optional[PhaseOptions] = None,
    rng: Optional[np.random.Generator] = None,
    run_id: Optional[str] = None,
) -> SdpSolution:
    """Solve the unit-diagonal semidefinite relaxation by low-rank factorization.

    Phi = V V^H with unit-norm rows of V; each iteration replaces V by the
    row-normalized (R + cI) V, which never decreases tr(R Phi). Runs that hit
    ``max_iter`` are restarted from a new random point up to ``retries`` times
    and the best iterate is returned with ``converged=False``.

    Args:
        R: Hermitian PSD matrix.
        options: Solver options.
        rng: Generator for the starting points.
        run_id: Run log to report restarts to.

    Returns:
        SdpSolution: Feasible Phi, its objective and a certified dual bound.

    Raises:
        DomainError: If R is not Hermitian.
    """
    R = np.asarray(R, dtype=complex)
    _check_hermitian(R)
    options = options or PhaseOptions()
    rng = rng if rng is not None else np.random.default_rng(0)
    solver = retry_until_converged(max_attempts=options.retries, score=lambda result: result.objective)(_solve_sdp_attempt)
    solution = solver(R, options, rng, run_id=run_id)
    if not solution.converged:
        msg = f"SDP stopped after {solution.iterations} iterations (relative change {solution.relative_change:.2e})"
        logger.warning(f"⚠️ {msg}")
        log_to_run_file(run_id, "warning", msg)
    return solution


def _project(candidates: np.ndarray, levels: Optional[int]) -> np.ndarray:
    theta = np.mod(np.angle(candidates), TWO_PI)
    if levels is not None:
        theta = _snap(theta, levels)
    return theta


def _snap(theta: np.ndarray, levels: int) -> np.ndarray:
    step = TWO_PI / levels
    return np.mod(np.round(theta / step), levels) * step


def gaussian_randomization(
    sdp: SdpSolution,
    R: np.ndarray,
    n_rand: int,
    rng: np.random.Generator,
    levels: Optional[int] = None,
) -> PhaseConfig:
    """Round the relaxed solution to a unit-modulus vector.

    Candidates U Sigma^(1/2) r with r standard complex Gaussian are projected
    elementwise onto the unit circle (or onto the L-ary alphabet when
    ``levels`` is given) and the best by phi^H R phi is kept. Draws are made
    in one block, so a larger ``n_rand`` with the same seed scores a superset
    of candidates.
    """
    if n_rand < 1:
        raise DomainError("Randomization needs at least one candidate")
    R = np.asarray(R, dtype=complex)
    M = R.shape[0]
    w, U = linalg.eigh(0.5 * (sdp.phi_matrix + sdp.phi_matrix.conj().T))
    factor = U * np.sqrt(np.clip(w, 0.0, None))

    z = rng.standard_normal((n_rand, M, 2))
    draws = (z[..., 0] + 1j * z[..., 1]) / math.sqrt(2.0)

    best_value = -np.inf
    best_theta = np.zeros(M)
    for start in range(0, n_rand, SCORE_CHUNK):
        theta = _project(draws[start:start + SCORE_CHUNK] @ factor.T, levels)
        values = _batch_values(R, np.exp(1j * theta))
        idx = int(np.argmax(values))
        if values[idx] > best_value:
            best_value = values[idx]
            best_theta = theta[idx]
    return PhaseConfig(theta=best_theta)


def quantize_phases(phase: PhaseConfig, levels: int) -> PhaseConfig:
    """Snap every phase to the nearest of L equally spaced levels starting at 0."""
    if levels < 2:
        raise DomainError(f"Discrete phases need at least 2 levels, got {levels}")
    return PhaseConfig(theta=_snap(phase.theta, levels))


def discrete_bound(levels: int) -> float:
    """Worst-case accuracy of L-level randomized rounding, (L sin(pi/L))^2 / (4 pi)."""
    if levels < 2:
        raise DomainError(f"Discrete phases need at least 2 levels, got {levels}")
    return (levels * math.sin(math.pi / levels)) ** 2 / (4.0 * math.pi)


def equal_phase_config(M: int) -> PhaseConfig:
    if M < 1:
        raise InvalidDimensionError(f"RIS element count must be >= 1, got {M}")
    return PhaseConfig(theta=np.zeros(M))


def random_phases(M: int, rng: np.random.Generator) -> PhaseConfig:
    if M < 1:
        raise InvalidDimensionError(f"RIS element count must be >= 1, got {M}")
    return PhaseConfig(theta=rng.uniform(0.0, TWO_PI, M))


def brute_force_opt(R: np.ndarray, levels: int, budget: int = ENUMERATION_BUDGET) -> Tuple[PhaseConfig, float]:
    """Exact maximizer of phi^H R phi over the L-ary alphabet.

    The first phase is pinned to 0 since a common rotation leaves the value
    unchanged, so L^(M-1) vectors are scored.

    Raises:
        BudgetExceededError: If L^M exceeds the enumeration budget.
    """
    R = np.asarray(R, dtype=complex)
    _check_hermitian(R)
    if levels < 2:
        raise DomainError(f"Discrete phases need at least 2 levels, got {levels}")
    M = R.shape[0]
    if levels ** M > budget:
        raise BudgetExceededError(f"{levels}^{M} candidates exceed the enumeration budget of {budget}")
    if M == 1:
        return PhaseConfig(theta=np.zeros(1)), float(np.real(R[0, 0]))

    step = TWO_PI / levels
    total = levels ** (M - 1)
    shape = (levels,) * (M - 1)
    best_value = -np.inf
    best_theta = np.zeros(M)
    for start in range(0, total, SCORE_CHUNK):
        idx = np.arange(start, min(start + SCORE_CHUNK, total))
        digits = np.stack(np.unravel_index(idx, shape), axis=1)
        theta = np.concatenate([np.zeros((idx.size, 1)), digits * step], axis=1)
        values = _batch_values(R, np.exp(1j * theta))
        i = int(np.argmax(values))
        if values[i] > best_value:
            best_value = float(values[i])
            best_theta = theta[i]
    return PhaseConfig(theta=best_theta), best_value


def _spectral_bound(R: np.ndarray) -> float:
    M = R.shape[0]
    return M * float(linalg.eigvalsh(R, subset_by_index=[M - 1, M - 1])[0])


def optimize(
    R: np.ndarray,
    mode: str = 'continuous',
    options: Optional[PhaseOptions] = None,
    rng: Optional[np.random.Generator] = None,
    symmetric: bool = False,
    run_id: Optional[str] = None,
) -> PhaseSolution:
    """Design the RIS phases maximizing phi^H R phi.

    Args:
        R: Hermitian PSD matrix R_t o R_r^T.
        mode: 'continuous', 'discrete', 'equal' or 'random'.
        options: Solver and rounding options.
        rng: Random generator.
        symmetric: True when R_t = R_r, in which case equal phases are optimal
            and the solver is skipped.
        run_id: Run log to report milestones to.

    Returns:
        PhaseSolution: Phases, achieved eta, certified upper bound and their ratio.

    Raises:
        DomainError: If the mode is unknown or R is not Hermitian.
        NumericError: If the achieved value exceeds the certified bound.
    """
    R = np.asarray(R, dtype=complex)
    _check_hermitian(R)
    options = options or PhaseOptions()
    rng = rng if rng is not None else np.random.default_rng(0)
    M = R.shape[0]
    spectral = _spectral_bound(R)

    sdp = None
    levels = None
    if mode == 'equal' or (symmetric and mode in ('continuous', 'equal')):
        phase = equal_phase_config(M)
        upper = min(dual_upper_bound(R, np.ones((M, M), dtype=complex)), spectral)
        mode = 'equal'
    elif mode in ('continuous', 'discrete', 'random'):
        sdp = solve_sdp(R, options, rng, run_id=run_id)
        upper = min(sdp.dual_bound, spectral)
        if mode == 'random':
            phase = random_phases(M, rng)
        else:
            levels = options.levels if mode == 'discrete' else None
            phase = gaussian_randomization(sdp, R, options.n_rand, rng, levels=levels)
    else:
        raise DomainError(f"Unknown phase design mode: {mode}")

    achieved = max(quadratic_value(R, phase.phi), 0.0)
    if upper <= 0:
        raise NumericError(f"Non-positive relaxation bound {upper}")
    if achieved > upper * (1 + 1e-8):
        raise NumericError(f"Achieved eta {achieved:.10g} exceeds the certified bound {upper:.10g}")
    gamma = min(achieved / upper, 1.0)

    msg = f"Phase design ({mode}): eta={achieved:.6g}, upper={upper:.6g}, gamma={gamma:.4f}"
    logger.info(f"🧮 {msg}")
    log_to_run_file(run_id, "optimizing", msg)
    return PhaseSolution(
        phase=phase,
        eta_achieved=achieved,
        sdp_upper=upper,
        gamma_certified=gamma,
        mode=mode,
        levels=levels,
        sdp=sdp,
    )

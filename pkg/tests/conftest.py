import os
from pathlib import Path

import numpy as np
import pytest

from ris_flow.channel import ChannelStats, Scenario

REPO_ROOT = Path(__file__).resolve().parents[1]
SCENARIO_DIR = REPO_ROOT / 'scenarios'


def identity_stats(alpha_user, alpha_ap, M: int = 4) -> ChannelStats:
    """Uncorrelated RIS with the given large-scale gains."""
    eye = np.eye(M, dtype=complex)
    return ChannelStats(alpha_user=np.asarray(alpha_user, dtype=float), alpha_ap=np.asarray(alpha_ap, dtype=float),
                        R_t=eye, R_r=eye.copy(), R=eye.copy())


def toy_scenario(arrival_rates, mean_file_sizes=None, noise_power: float = 1.0, seed: int = 0) -> Scenario:
    """1 MHz, 1 ms slots: a location at SINR s serves log2(1 + s) flows of 1000 bits per slot."""
    K = len(arrival_rates)
    sizes = np.full(K, 1000.0) if mean_file_sizes is None else np.asarray(mean_file_sizes, dtype=float)
    return Scenario(
        ap_positions=np.array([[-0.9, -0.9]]),
        ris_position=np.zeros(2),
        location_positions=np.column_stack([np.linspace(0.2, 0.8, K), np.linspace(0.2, 0.8, K)]),
        ris_elements=4,
        bandwidth_hz=1e6,
        noise_power=noise_power,
        powers=np.ones(K),
        mean_file_sizes=sizes,
        arrival_rates=np.asarray(arrival_rates, dtype=float),
        slot_duration_s=1e-3,
        seed=seed,
        name='toy',
    )


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """Run inside a scratch directory so run logs and outputs land there."""
    monkeypatch.chdir(tmp_path)
    for name in ('RIS_PROFILE', 'RIS_OUTPUT_DIR', 'RIS_WORKERS'):
        monkeypatch.delenv(name, raising=False)
    return tmp_path


@pytest.fixture
def desk_config() -> str:
    return os.fspath(SCENARIO_DIR / 'desk_k2.toml')

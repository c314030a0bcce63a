import copy
import logging
import math
import os
import re
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np

from config import PROFILES, SIMULATION_CONFIG
from ris_flow.channel import (
    ChannelStats,
    CorrelationModel,
    PathlossParams,
    Scenario,
    build_stats,
    grid_locations,
    uniform_subregion,
)
from ris_flow.errors import ConfigError, RisFlowError
from ris_flow.models import ExperimentSpec, SimulationSettings
from ris_flow.phase_opt import PhaseOptions
from utils import config_hash, derive_seed, log_to_run_file

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)

THERMAL_NOISE_DBM_PER_HZ = -174.0
_LINE_PATTERN = re.compile(r'line (\d+)')


@dataclass(frozen=True)
class Experiment:
    """A fully resolved experiment: validated settings plus the domain objects built from them."""
    spec: ExperimentSpec
    settings: SimulationSettings
    config: Dict[str, Any]
    config_hash: str
    seed: int
    scenario: Scenario
    correlation: CorrelationModel
    phase_options: PhaseOptions

    def build_stats(self) -> ChannelStats:
        return build_stats(self.scenario, self.correlation, rng=np.random.default_rng(derive_seed(self.seed, 1)))


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge ``override`` into a copy of ``base``; dicts merge, everything else replaces."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_scenario_file(path: str) -> Dict[str, Any]:
    """Read a TOML scenario file.

    Raises:
        ConfigError: If the file is missing or malformed; parse errors carry the line number.
    """
    try:
        with open(path, 'rb') as f:
            return tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Scenario file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        match = _LINE_PATTERN.search(str(e))
        raise ConfigError(f"Cannot parse {path}: {e}", line=int(match.group(1)) if match else None) from e


def _parse_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def parse_overrides(overrides: List[str]) -> Dict[str, Any]:
    """Turn ``section.key=value`` strings into a nested dict; values are read as TOML literals."""
    result: Dict[str, Any] = {}
    for item in overrides:
        key, sep, raw = item.partition('=')
        if not sep or '.' not in key:
            raise ConfigError(f'Override "{item}" must look like section.key=value')
        *sections, leaf = key.strip().split('.')
        node = result
        for section in sections:
            node = node.setdefault(section, {})
        node[leaf] = _parse_value(raw.strip())
    return result


def environment_overrides() -> Dict[str, Any]:
    workers = os.getenv('RIS_WORKERS')
    if not workers:
        return {}
    try:
        return {'region': {'workers': int(workers)}}
    except ValueError as e:
        raise ConfigError(f"RIS_WORKERS must be an integer, got {workers!r}") from e


def merge_config(spec: ExperimentSpec) -> Dict[str, Any]:
    """Defaults, then profile, scenario file, environment, command-line flags and --set overrides."""
    if spec.profile not in PROFILES:
        raise ConfigError(f"Unknown profile: {spec.profile}. Must be one of: {', '.join(PROFILES)}")
    merged = deep_merge(SIMULATION_CONFIG, PROFILES[spec.profile])
    if spec.config_path:
        merged = deep_merge(merged, read_scenario_file(spec.config_path))
    merged = deep_merge(merged, environment_overrides())

    flags: Dict[str, Any] = {}
    if spec.seed is not None:
        flags.setdefault('scenario', {})['seed'] = spec.seed
    if spec.policy is not None:
        flags.setdefault('simulation', {})['policy'] = spec.policy
    if spec.slots is not None:
        flags.setdefault('simulation', {})['slots'] = spec.slots
    if spec.budget is not None:
        flags.setdefault('validate', {})['budget'] = spec.budget
    merged = deep_merge(merged, flags)
    return deep_merge(merged, parse_overrides(spec.overrides))


def _per_location(value, count: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (count,)).copy()


def noise_power_watt(settings: SimulationSettings) -> float:
    s = settings.scenario
    if s.noise_power_w is not None:
        return s.noise_power_w
    if s.noise_power_dbm not in (None, 'thermal'):
        return dbm_to_watt(s.noise_power_dbm)
    return dbm_to_watt(THERMAL_NOISE_DBM_PER_HZ + 10.0 * math.log10(s.bandwidth_hz) + s.noise_figure_db)


def build_scenario(settings: SimulationSettings) -> Scenario:
    """Domain scenario from validated settings.

    Raises:
        ConfigError: If the settings describe an impossible network.
    """
    s, geo, pl, traffic = settings.scenario, settings.geometry, settings.pathloss, settings.traffic
    rng = np.random.default_rng(derive_seed(s.seed, 0))
    K = s.num_locations

    if geo.ap_layout == 'explicit':
        aps = np.asarray(geo.ap_positions, dtype=float)
    else:
        aps = uniform_subregion(s.num_aps, geo.ap_subregion[0], geo.ap_subregion[1], rng)
    try:
        if geo.location_layout == 'explicit':
            locations = np.asarray(geo.location_positions, dtype=float)
        else:
            locations = grid_locations(K, geo.location_subregion[0], geo.location_subregion[1])
        powers = np.array([dbm_to_watt(p) for p in _per_location(s.transmit_power_dbm, K)])
        return Scenario(
            ap_positions=aps,
            ris_position=np.asarray(geo.ris_position, dtype=float),
            location_positions=locations,
            ris_elements=s.ris_elements,
            bandwidth_hz=s.bandwidth_hz,
            noise_power=noise_power_watt(settings),
            powers=powers,
            mean_file_sizes=_per_location(traffic.mean_file_size_bits, K),
            arrival_rates=_per_location(traffic.arrival_rates, K),
            slot_duration_s=s.slot_duration_s,
            area_half_width_km=s.area_half_width_km,
            carrier_frequency_ghz=s.carrier_frequency_ghz,
            seed=s.seed,
            pathloss=PathlossParams(
                frequency_mhz=1000.0 * s.carrier_frequency_ghz,
                ap_height_m=pl.ap_height_m,
                user_height_m=pl.user_height_m,
                d0_km=pl.d0_km,
                d1_km=pl.d1_km,
                shadow_std_db=pl.shadow_std_db,
            ),
            name=s.name,
        )
    except RisFlowError as e:
        raise ConfigError(f"Invalid scenario '{s.name}': {e}") from e


def build_correlation_model(settings: SimulationSettings) -> CorrelationModel:
    c = settings.correlation
    return CorrelationModel(
        kind=c.kind,
        rho_t=complex(*c.rho_t),
        rho_r=complex(*c.rho_r),
        spacing_wavelengths=c.spacing_wavelengths,
    )


def build_phase_options(settings: SimulationSettings) -> PhaseOptions:
    p = settings.phase
    return PhaseOptions(n_rand=p.n_rand, tol=p.tol, max_iter=p.max_iter, rank=p.rank, levels=p.levels, retries=p.retries)


def load_experiment(spec: ExperimentSpec, run_id: Optional[str] = None) -> Experiment:
    """Merge, validate and build everything an experiment needs.

    Args:
        spec: The command-line request.
        run_id: Run log to report to.

    Returns:
        Experiment: Settings, config hash, seed and domain objects.

    Raises:
        ConfigError: On unreadable files or impossible scenarios.
        pydantic.ValidationError: On out-of-range settings.
    """
    merged = merge_config(spec)
    settings = SimulationSettings.model_validate(merged)
    canonical = settings.model_dump(mode='json', by_alias=True)
    digest = config_hash(canonical)
    scenario = build_scenario(settings)

    msg = (
        f"Loaded scenario '{scenario.name}' (profile {spec.profile}): K={scenario.num_locations}, "
        f"N={scenario.num_aps}, M={scenario.ris_elements}, hash {digest[:8]}"
    )
    logger.info(f"⚙️ {msg}")
    log_to_run_file(run_id, "config", msg)
    return Experiment(
        spec=spec,
        settings=settings,
        config=canonical,
        config_hash=digest,
        seed=settings.scenario.seed,
        scenario=scenario,
        correlation=build_correlation_model(settings),
        phase_options=build_phase_options(settings),
    )

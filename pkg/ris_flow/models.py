"""Validated configuration models.

The merged configuration dict (defaults, profile, scenario file, environment,
command line) is checked here before any domain object is built. Validation
failures surface as ``pydantic.ValidationError``.
"""
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

POLICIES = ('optimized', 'random', 'tdma', 'equal')
PHASE_MODES = ('continuous', 'discrete', 'equal', 'random')
EXPERIMENT_KINDS = ('optimize', 'simulate', 'region', 'sweep', 'fluid', 'validate')

Point = Tuple[float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class ScenarioSection(_Section):
    name: str = 'desk_k2'
    seed: int = 2024
    num_aps: int = Field(16, ge=1)
    num_locations: int = Field(2, ge=1)
    ris_elements: int = Field(64, ge=1)
    area_half_width_km: float = Field(1.0, gt=0)
    carrier_frequency_ghz: float = Field(1.9, gt=0)
    bandwidth_hz: float = Field(20e6, gt=0)
    slot_duration_s: float = Field(0.01, gt=0)
    noise_figure_db: float = 9.0
    noise_power_dbm: Optional[Union[float, Literal['thermal']]] = -230.0
    noise_power_w: Optional[float] = None
    transmit_power_dbm: Union[float, List[float]] = 20.0

    @field_validator('noise_power_w')
    def validate_noise_power(cls, v):
        if v is not None and v <= 0:
            raise ValueError('Noise power must be positive')
        return v

    @field_validator('name')
    def validate_non_empty_string(cls, v):
        if not v or v.strip() == "":
            raise ValueError('Field cannot be empty')
        return v


class GeometrySection(_Section):
    ap_layout: Literal['uniform_subregion', 'explicit'] = 'uniform_subregion'
    ap_subregion: Tuple[Point, Point] = ((-1.0, -1.0), (-0.75, -0.75))
    ap_positions: Optional[List[Point]] = None
    ris_position: Point = (0.0, 0.0)
    location_layout: Literal['grid', 'explicit'] = 'explicit'
    location_subregion: Tuple[Point, Point] = ((0.05, 0.05), (1.0, 1.0))
    location_positions: Optional[List[Point]] = [(0.25, 0.25), (0.75, 0.75)]

    @model_validator(mode='after')
    def validate_explicit_positions(self):
        if self.ap_layout == 'explicit' and not self.ap_positions:
            raise ValueError('ap_layout = "explicit" needs at least one entry in ap_positions')
        if self.location_layout == 'explicit' and not self.location_positions:
            raise ValueError('location_layout = "explicit" needs at least one entry in location_positions')
        return self


class PathlossSection(_Section):
    ap_height_m: float = Field(15.0, gt=0)
    user_height_m: float = Field(1.65, gt=0)
    d0_km: float = Field(0.01, gt=0)
    d1_km: float = Field(0.05, gt=0)
    shadow_std_db: float = Field(0.0, ge=0)

    @model_validator(mode='after')
    def validate_breakpoints(self):
        if self.d0_km >= self.d1_km:
            raise ValueError('Breakpoints must satisfy d0_km < d1_km')
        return self


class CorrelationSection(_Section):
    kind: Literal['exponential', 'isotropic', 'identity'] = 'exponential'
    rho_t: Tuple[float, float] = (0.0, 0.0)
    rho_r: Tuple[float, float] = (0.0, 0.0)
    spacing_wavelengths: float = Field(0.5, gt=0)

    @field_validator('rho_t', 'rho_r', mode='before')
    def validate_rho(cls, v):
        if isinstance(v, (int, float)):
            v = (float(v), 0.0)
        if abs(complex(v[0], v[1])) > 1.0:
            raise ValueError('Correlation coefficient must satisfy |rho| <= 1')
        return v


class TrafficSection(_Section):
    arrival_rates: Union[float, List[float]] = 0.0
    mean_file_size_bits: Union[float, List[float]] = 1e6

    @field_validator('arrival_rates')
    def validate_rates(cls, v):
        values = v if isinstance(v, list) else [v]
        if any(rate < 0 for rate in values):
            raise ValueError('Arrival rates cannot be negative')
        return v

    @field_validator('mean_file_size_bits')
    def validate_sizes(cls, v):
        values = v if isinstance(v, list) else [v]
        if not values or any(size <= 0 for size in values):
            raise ValueError('Mean file sizes must be positive')
        return v


class PhaseSection(_Section):
    mode: Literal['continuous', 'discrete', 'equal', 'random'] = 'continuous'
    levels: int = Field(4, ge=2)
    n_rand: int = Field(1000, ge=1)
    tol: float = Field(1e-8, gt=0)
    max_iter: int = Field(5000, ge=1)
    rank: Optional[int] = Field(None, ge=1)
    retries: int = Field(3, ge=1)


class SimulationSection(_Section):
    policy: Literal['optimized', 'random', 'tdma', 'equal'] = 'optimized'
    slots: int = Field(20000, ge=1)
    window: int = Field(500, ge=1)
    record_every: int = Field(1, ge=1)
    all_active_transmit: bool = False
    trend_fraction: float = Field(0.25, gt=0, le=1)
    trend_z: float = Field(1.645, ge=0)


class RegionSection(_Section):
    policies: List[Literal['optimized', 'random', 'tdma', 'equal']] = ['optimized', 'tdma']
    rays: Optional[List[List[float]]] = None
    slots: int = Field(5000, ge=1)
    window: int = Field(250, ge=1)
    threshold: float = Field(1e-3, gt=0)
    trend_fraction: float = Field(0.5, gt=0, le=1)
    tol: float = Field(0.02, gt=0, lt=1)
    scale_max: Optional[float] = Field(None, gt=0)
    workers: int = Field(1, ge=1)

    @field_validator('policies')
    def validate_non_empty_list(cls, v):
        if not v or len(v) == 0:
            raise ValueError('At least one policy must be provided')
        return v

    @field_validator('rays')
    def validate_rays(cls, v):
        for ray in v or []:
            if any(component < 0 for component in ray) or not any(component > 0 for component in ray):
                raise ValueError('Rays must be nonnegative with at least one positive component')
        return v


class SweepSection(_Section):
    policies: List[Literal['optimized', 'random', 'tdma', 'equal']] = ['optimized', 'random']
    direction: Optional[List[float]] = None
    points: int = Field(10, ge=1)
    scale_max: Optional[float] = Field(None, gt=0)
    slots: int = Field(4000, ge=1)
    window: int = Field(250, ge=1)
    threshold: float = Field(1e-3, gt=0)
    trend_fraction: float = Field(0.5, gt=0, le=1)

    @field_validator('policies')
    def validate_non_empty_list(cls, v):
        if not v or len(v) == 0:
            raise ValueError('At least one policy must be provided')
        return v

    @field_validator('direction')
    def validate_direction(cls, v):
        if v is not None and (any(component < 0 for component in v) or not any(component > 0 for component in v)):
            raise ValueError('The sweep direction must be nonnegative with at least one positive component')
        return v


class FluidSection(_Section):
    policy: Literal['optimized', 'tdma'] = 'optimized'
    dt: float = Field(1e-3, gt=0)
    horizon: Optional[float] = Field(None, gt=0)
    gamma: Optional[float] = Field(None, gt=0, le=1)
    epsilon: Optional[float] = Field(None, gt=0)
    initial: Optional[List[float]] = None
    max_steps: int = Field(1_000_000, ge=1)

    @field_validator('initial')
    def validate_initial(cls, v):
        if v is not None and (any(y < 0 for y in v) or sum(v) <= 0):
            raise ValueError('Initial fluid volumes must be nonnegative and not all zero')
        return v


class ValidateSection(_Section):
    budget: Literal['full', 'reduced'] = 'full'
    samples: int = Field(10000, ge=100)
    trials: int = Field(100, ge=1)
    queue_slots: int = Field(200000, ge=1000)


class SimulationSettings(_Section):
    """The whole validated configuration tree."""
    scenario: ScenarioSection = Field(default_factory=ScenarioSection)
    geometry: GeometrySection = Field(default_factory=GeometrySection)
    pathloss: PathlossSection = Field(default_factory=PathlossSection)
    correlation: CorrelationSection = Field(default_factory=CorrelationSection)
    traffic: TrafficSection = Field(default_factory=TrafficSection)
    phase: PhaseSection = Field(default_factory=PhaseSection)
    simulation: SimulationSection = Field(default_factory=SimulationSection)
    region: RegionSection = Field(default_factory=RegionSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    fluid: FluidSection = Field(default_factory=FluidSection)
    validate_: ValidateSection = Field(default_factory=ValidateSection, alias='validate')

    model_config = ConfigDict(extra='forbid', populate_by_name=True)

    @model_validator(mode='after')
    def validate_per_location_lists(self):
        k = self.scenario.num_locations
        for name, value in (
            ('transmit_power_dbm', self.scenario.transmit_power_dbm),
            ('arrival_rates', self.traffic.arrival_rates),
            ('mean_file_size_bits', self.traffic.mean_file_size_bits),
        ):
            if isinstance(value, list) and len(value) != k:
                raise ValueError(f'{name} has {len(value)} entries for {k} locations')
        if self.geometry.location_layout == 'explicit' and len(self.geometry.location_positions) != k:
            raise ValueError(f'location_positions has {len(self.geometry.location_positions)} entries for {k} locations')
        if self.geometry.ap_layout == 'explicit' and len(self.geometry.ap_positions) != self.scenario.num_aps:
            raise ValueError(f'ap_positions has {len(self.geometry.ap_positions)} entries for {self.scenario.num_aps} APs')
        for ray in self.region.rays or []:
            if len(ray) != k:
                raise ValueError(f'Region ray {ray} does not have {k} components')
        if self.sweep.direction is not None and len(self.sweep.direction) != k:
            raise ValueError(f'sweep.direction has {len(self.sweep.direction)} entries for {k} locations')
        if self.fluid.initial is not None and len(self.fluid.initial) != k:
            raise ValueError(f'fluid.initial has {len(self.fluid.initial)} entries for {k} locations')
        return self


class ExperimentSpec(BaseModel):
    """One command-line invocation."""
    kind: Literal['optimize', 'simulate', 'region', 'sweep', 'fluid', 'validate']
    config_path: Optional[str] = None
    policy: Optional[Literal['optimized', 'random', 'tdma', 'equal']] = None
    output_dir: str = 'results'
    seed: Optional[int] = None
    slots: Optional[int] = Field(None, ge=1)
    profile: str = 'desk'
    budget: Optional[Literal['full', 'reduced']] = None
    overrides: List[str] = []

    @field_validator('output_dir')
    def validate_non_empty_string(cls, v):
        if not v or v.strip() == "":
            raise ValueError('Field cannot be empty')
        return v

    @field_validator('overrides')
    def validate_overrides(cls, v):
        for item in v:
            key, sep, _ = item.partition('=')
            if not sep or '.' not in key:
                raise ValueError(f'Override "{item}" must look like section.key=value')
        return v

"""
    Plain-text engine configuration: a YAML file with one mapping per
    section, parsed into frozen dataclasses. Every value is range-checked at
    parse time by building the engine types it configures.
"""

import logging
import os
from dataclasses import dataclass, field, fields, replace

import yaml

from rtwin.errors import ConfigValidationError, MissingFileError, ValidationError
from rtwin.settings import config

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EngineSection:
    seed: int = config.SEED
    threads: int = config.THREADS


@dataclass(frozen=True)
class PhantomSection:
    shape: tuple[int, int, int] = config.DESK_SHAPE
    voxel_dims: tuple[float, float, float] = config.VOXEL_DIMS_MM
    target_center: tuple[float, float, float] | None = None
    target_radius: float = 9.0
    target_name: str = "PTV"
    oars: tuple[dict, ...] | None = None
    prescription: float = config.PRESCRIPTION_GY
    margin: float = config.FEASIBLE_MARGIN_MM
    kernel_width: float = config.KERNEL_WIDTH_MM
    ct_noise_hu: float = 0.0
    cohort_size: int = 10
    cohort_seed: int = 0

    def to_spec(self):
        from rtwin.grid_core import GridShape
        from rtwin.phantom import OarSpec, desk_phantom_spec

        overrides = dict(
            shape=GridShape(*self.shape, self.voxel_dims),
            target_radius=self.target_radius,
            target_name=self.target_name,
            prescription=self.prescription,
            margin=self.margin,
            kernel_width=self.kernel_width,
            ct_noise_hu=self.ct_noise_hu,
        )
        if self.target_center is not None:
            overrides["target_center"] = tuple(self.target_center)
        elif tuple(self.shape) != config.DESK_SHAPE or tuple(self.voxel_dims) != config.VOXEL_DIMS_MM:
            overrides["target_center"] = tuple((n - 1) * d / 2 for n, d in zip(self.shape, self.voxel_dims))
        if self.oars is not None:
            overrides["oar_specs"] = tuple(
                OarSpec(str(o["name"]), tuple(o["center"]), float(o["radius"]), float(o.get("hu", config.OAR_HU)))
                for o in self.oars
            )
        return desk_phantom_spec(**overrides)


@dataclass(frozen=True)
class FeatureSection:
    distance_rois: tuple[str, ...] = ()
    smoothing_scales: tuple[float, ...] = config.SMOOTHING_SCALES_MM
    falloff_widths: tuple[float, ...] = ()
    include_drift: bool = False
    include_bias: bool = True
    distance_scale: float = config.DISTANCE_SCALE_MM

    def to_config(self):
        from rtwin.surrogate import FeatureConfig

        return FeatureConfig(
            self.distance_rois,
            self.smoothing_scales,
            self.falloff_widths,
            self.include_drift,
            self.include_bias,
            self.distance_scale,
        )


@dataclass(frozen=True)
class TrainingSection:
    learning_rate: float = config.LEARNING_RATE
    iterations: int = config.ITERATIONS
    minibatch: int = config.MINIBATCH
    seed: int = 0
    tolerance: float = config.TOLERANCE
    dropout_rate: float = config.DROPOUT_RATE
    init_low: float = config.INIT_LOW
    init_high: float = config.INIT_HIGH

    def to_config(self):
        from rtwin.surrogate import TrainConfig

        return TrainConfig(self.learning_rate, self.iterations, self.minibatch, self.seed, self.tolerance)


@dataclass(frozen=True)
class CalibrationSection:
    n_particles: int = config.N_PARTICLES
    observation_noise: float = config.OBSERVATION_NOISE_GY
    process_noise: float = config.PROCESS_NOISE
    ridge: float = config.RIDGE
    observation_window: int = config.OBSERVATION_WINDOW
    map_iterations: int = config.MAP_ITERATIONS
    map_tolerance: float = config.MAP_TOLERANCE


@dataclass(frozen=True)
class DecisionSection:
    ensemble_size: int = config.ENSEMBLE_SIZE
    aggregation: str = config.UNCERTAINTY_AGGREGATION
    scale_bounds: tuple[float, float] = config.SCALE_BOUNDS
    utility: dict = field(default_factory=dict)
    actions: tuple[dict, ...] = ({"id": "identity", "kind": "scale", "scale": 1.0},)
    constraints: tuple[dict, ...] = ()

    def utility_config(self):
        from rtwin.decision import UtilityConfig

        known = {item.name for item in fields(UtilityConfig)}
        unknown = sorted(set(self.utility) - known)
        if unknown:
            raise ConfigValidationError(f"decision.utility: unknown keys {unknown}")
        return UtilityConfig(**self.utility)

    def action_specs(self, record=None):
        from rtwin.decision import parse_actions

        return parse_actions(list(self.actions), record, tuple(self.scale_bounds))

    def constraint_specs(self):
        from rtwin.decision import parse_constraints

        return parse_constraints(list(self.constraints))


@dataclass(frozen=True)
class ScenarioSection:
    n_fractions: int = config.N_FRACTIONS
    shifts: tuple[dict, ...] = (
        {"fraction": config.SHIFT_FRACTION, "displacement": (config.SHIFT_VOXELS * config.VOXEL_DIMS_MM[0], 0.0, 0.0)},
    )
    recalibrate_every: int = config.RECALIBRATE_EVERY
    trigger_factor: float = config.TRIGGER_FACTOR
    trigger_window: int = config.TRIGGER_WINDOW
    ensemble_size: int = config.SCENARIO_ENSEMBLE_SIZE
    dropout_rate: float = config.SCENARIO_DROPOUT_RATE
    init_range: tuple[float, float] = config.SCENARIO_INIT_RANGE
    learning_rate: float = config.SCENARIO_LEARNING_RATE
    iterations: int = config.SCENARIO_ITERATIONS
    ntcp_reference: float = config.NTCP_REFERENCE

    def shift_events(self):
        from rtwin.phantom import ShiftEvent

        return tuple(ShiftEvent(int(s["fraction"]), tuple(s["displacement"])) for s in self.shifts)


@dataclass(frozen=True)
class IoSection:
    output_dir: str = "outputs"
    target_names: tuple[str, ...] = tuple(config.TARGET_ROI_NAMES)
    oar_names: tuple[str, ...] = tuple(config.OAR_ROI_NAMES)
    n_dvh_levels: int = config.N_DVH_LEVELS
    band_confidence: float = config.BAND_CONFIDENCE


SECTIONS = {
    "engine": EngineSection,
    "phantom": PhantomSection,
    "features": FeatureSection,
    "training": TrainingSection,
    "calibration": CalibrationSection,
    "decision": DecisionSection,
    "scenario": ScenarioSection,
    "io": IoSection,
}


@dataclass(frozen=True)
class EngineConfig:
    engine: EngineSection = field(default_factory=EngineSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    decision: DecisionSection = field(default_factory=DecisionSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    io: IoSection = field(default_factory=IoSection)
    source: str = field(default="", compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Builds every engine type the file configures; range errors name their section."""
        checks = {
            "phantom": self.phantom_spec,
            "features": self.feature_config,
            "training": self.train_config,
            "decision": lambda: (self.decision.utility_config(), self.decision.constraint_specs()),
            "scenario": self.scenario_spec,
        }
        for section, check in checks.items():
            try:
                check()
            except ConfigValidationError:
                raise
            except (ValidationError, KeyError, TypeError) as exc:
                raise ConfigValidationError(f"{section}: {exc}") from exc
        if self.engine.threads < 0:
            raise ConfigValidationError("engine.threads: must be >= 0")
        if self.decision.ensemble_size < 1 or self.scenario.ensemble_size < 2:
            raise ConfigValidationError("ensemble_size: decision needs >= 1 and scenario >= 2 members")
        if not 0 <= self.training.dropout_rate < 1 or not 0 <= self.scenario.dropout_rate < 1:
            raise ConfigValidationError("dropout_rate: must lie in [0, 1)")
        if self.calibration.n_particles < 1 or self.calibration.observation_noise < 0:
            raise ConfigValidationError("calibration: n_particles must be >= 1 and observation_noise >= 0")
        if self.calibration.process_noise <= 0 or self.calibration.ridge < 0:
            raise ConfigValidationError("calibration: process_noise must be > 0 and ridge >= 0")

    def phantom_spec(self):
        return self.phantom.to_spec()

    def feature_config(self):
        return self.features.to_config()

    def train_config(self):
        return self.training.to_config()

    def scenario_spec(self, params=None, seed: int | None = None):
        from rtwin.phantom import generate_phantom
        from rtwin.twin_loop import ScenarioSpec

        phantom = self.phantom_spec()
        spatial = any(entry.get("kind") == "spatial_mask" for entry in self.decision.actions)
        record = generate_phantom(phantom) if spatial else None
        return ScenarioSpec(
            phantom=phantom,
            n_fractions=self.scenario.n_fractions,
            shift_events=self.scenario.shift_events(),
            actions=tuple(self.decision.action_specs(record)),
            constraints=tuple(self.decision.constraint_specs()),
            utility=self.decision.utility_config(),
            k=self.scenario.ensemble_size,
            recalibrate_every=self.scenario.recalibrate_every,
            seed=self.engine.seed if seed is None else seed,
            params=params,
            train_cfg=replace(
                self.train_config(), learning_rate=self.scenario.learning_rate, iterations=self.scenario.iterations
            ),
            dropout_rate=self.scenario.dropout_rate,
            init_range=tuple(self.scenario.init_range),
            ridge=self.calibration.ridge,
            observation_noise=self.calibration.observation_noise,
            observation_window=self.calibration.observation_window,
            trigger_factor=self.scenario.trigger_factor,
            trigger_window=self.scenario.trigger_window,
            n_particles=self.calibration.n_particles,
            process_noise=self.calibration.process_noise,
            map_iterations=self.calibration.map_iterations,
            map_tolerance=self.calibration.map_tolerance,
            aggregation=self.decision.aggregation,
            ntcp_reference=self.scenario.ntcp_reference,
        )

    def with_overrides(self, **sections) -> "EngineConfig":
        """Returns a copy with keys replaced per section, e.g. engine={'seed': 3}."""
        changes = {name: replace(getattr(self, name), **values) for name, values in sections.items()}
        return replace(self, **changes)

    def to_dict(self) -> dict:
        data = {}
        for name in SECTIONS:
            section = getattr(self, name)
            data[name] = {item.name: _plain(getattr(section, item.name)) for item in fields(section)}
        return data


def _plain(value):
    if isinstance(value, tuple | list):
        return [_plain(item) for item in value]
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    return value


def _frozen(value):
    if isinstance(value, list):
        return tuple(_frozen(item) for item in value)
    return value


def _section(name: str, cls, values) -> object:
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigValidationError(f"{name}: expected a mapping, got {type(values).__name__}")
    known = {item.name for item in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigValidationError(f"{name}: unknown keys {', '.join(f'{name}.{key}' for key in unknown)}")
    return cls(**{key: _frozen(value) for key, value in values.items()})


def parse_config(data: dict | None, source: str = "") -> EngineConfig:
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigValidationError("The configuration must be a mapping of sections")
    # the export stamp is informational
    unknown = sorted(set(data) - set(SECTIONS) - {"rtwin"})
    if unknown:
        raise ConfigValidationError(f"Unknown configuration sections: {', '.join(unknown)}")
    sections = {name: _section(name, cls, data.get(name)) for name, cls in SECTIONS.items()}
    return EngineConfig(**sections, source=source)


def import_config(config_filename: str | None = None) -> EngineConfig:
    """
    fn: import_config
    Description: Loads and validates an engine config file
    Args:
        config_filename (str, optional): absolute path, or a name inside the settings folder
    return:
        EngineConfig: validated configuration; built-in defaults for absent sections
    """
    config_filename = config.DEFAULT_CONFIG_FILE if config_filename is None else config_filename
    if not os.path.isabs(config_filename) and not os.path.exists(config_filename):
        config_filename = os.path.join(config.SETTINGS_DIR, config_filename)
    if not os.path.exists(config_filename):
        raise MissingFileError(f"Configuration file {config_filename} does not exist")
    logger.info(f"Using configuration file: {config_filename}")
    with open(config_filename) as stream:
        try:
            data = yaml.safe_load(stream)
        except yaml.YAMLError as exc:
            raise ConfigValidationError(f"{config_filename} is not valid YAML: {exc}") from exc
    return parse_config(data, source=config_filename)

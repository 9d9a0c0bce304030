"""
    Closed-loop fractionated twin: observe, recalibrate, predict, decide and
    log, once per fraction. Also the cohort benchmark.
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np
import pandas as pd
from tqdm import tqdm

from rtwin.calibration import (
    BeliefState,
    FractionObservation,
    belief_frame,
    belief_mean,
    dose_scaling_spec,
    filter_update,
    init_belief,
    map_update,
    proxy_recalibrate,
)
from rtwin.decision import (
    ActionSpec,
    ConstraintSpec,
    UtilityConfig,
    apply_action,
    max_ntcp,
    select_action,
    tcp,
)
from rtwin.errors import (
    FractionError,
    LikelihoodUnderflowError,
    MissingReferenceDoseError,
    RtwinError,
    ValidationError,
)
from rtwin.grid_core import PatientRecord, ScalarGrid, masked_values
from rtwin.phantom import PhantomSpec, ShiftEvent, apply_shift, desk_phantom_spec, generate_phantom
from rtwin.settings.config import (
    BAR_FORMAT,
    MAP_ITERATIONS,
    MAP_TOLERANCE,
    N_FRACTIONS,
    N_PARTICLES,
    NTCP_REFERENCE,
    OBSERVATION_NOISE_GY,
    OBSERVATION_WINDOW,
    PROCESS_NOISE,
    RECALIBRATE_EVERY,
    RIDGE,
    SCENARIO_DROPOUT_RATE,
    SCENARIO_ENSEMBLE_SIZE,
    SCENARIO_INIT_RANGE,
    SCENARIO_ITERATIONS,
    SCENARIO_LEARNING_RATE,
    SCENARIO_PRIOR_SPREAD,
    TRIGGER_FACTOR,
    TRIGGER_WINDOW,
    UNCERTAINTY_AGGREGATION,
)
from rtwin.surrogate import (
    FeatureConfig,
    KernelSurrogate,
    ParamVector,
    TrainConfig,
    init_params,
    train,
)
from rtwin.uq_metrics import (
    DvhBand,
    DvhMetricSpec,
    bands_frame,
    dose_score,
    dvh_band,
    dvh_score,
    ensemble_stats,
    uncertainty_penalty,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScenarioSpec:
    phantom: PhantomSpec = field(default_factory=desk_phantom_spec)
    n_fractions: int = N_FRACTIONS
    shift_events: tuple[ShiftEvent, ...] = ()
    actions: tuple[ActionSpec, ...] = (ActionSpec.identity(),)
    constraints: tuple[ConstraintSpec, ...] = ()
    utility: UtilityConfig = field(default_factory=UtilityConfig)
    k: int = SCENARIO_ENSEMBLE_SIZE
    recalibrate_every: int = RECALIBRATE_EVERY
    seed: int = 0
    feature_cfg: FeatureConfig | None = None
    params: ParamVector | None = None
    train_cfg: TrainConfig = field(
        default_factory=lambda: TrainConfig(SCENARIO_LEARNING_RATE, SCENARIO_ITERATIONS)
    )
    dropout_rate: float = SCENARIO_DROPOUT_RATE
    init_range: tuple[float, float] = SCENARIO_INIT_RANGE
    ridge: float = RIDGE
    observation_noise: float = OBSERVATION_NOISE_GY
    observation_window: int = OBSERVATION_WINDOW
    trigger_factor: float = TRIGGER_FACTOR
    trigger_window: int = TRIGGER_WINDOW
    n_particles: int = N_PARTICLES
    process_noise: float = PROCESS_NOISE
    map_iterations: int = MAP_ITERATIONS
    map_tolerance: float = MAP_TOLERANCE
    aggregation: str = UNCERTAINTY_AGGREGATION
    ntcp_reference: float = NTCP_REFERENCE
    plan_library: tuple[ScalarGrid, ...] = ()

    def __post_init__(self):
        for name in ("shift_events", "actions", "constraints", "plan_library"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_fractions < 1:
            raise ValidationError("A scenario needs at least one fraction")
        if self.k < 2:
            raise ValidationError(f"Ensemble size must be >= 2, got {self.k}")
        if not self.actions:
            raise ValidationError("A scenario needs at least one candidate action")
        for event in self.shift_events:
            if event.fraction_index > self.n_fractions:
                raise ValidationError(
                    f"Shift at fraction {event.fraction_index} lies beyond T={self.n_fractions}"
                )
        if self.recalibrate_every < 0 or self.observation_window < 1 or self.trigger_window < 1:
            raise ValidationError("Recalibration interval, observation and trigger windows are out of range")
        if self.trigger_factor <= 0 or self.observation_noise < 0 or self.n_particles < 1:
            raise ValidationError("Trigger factor, observation noise and particle count are out of range")
        if self.map_iterations < 1 or self.map_tolerance < 0:
            raise ValidationError("MAP iteration budget must be >= 1 and its tolerance >= 0")
        if self.params is not None and self.params.n_features != self.features.n_features:
            raise ValidationError("Scenario parameters do not match the feature configuration")

    @property
    def features(self) -> FeatureConfig:
        if self.feature_cfg is not None:
            return self.feature_cfg
        if self.params is not None:
            return FeatureConfig.from_names(self.params.names)
        return FeatureConfig(
            smoothing_scales=(), falloff_widths=(self.phantom.kernel_width,), include_drift=True, include_bias=False
        )

    @property
    def ensemble_seeds(self) -> tuple[int, ...]:
        """The same dropout seeds every fraction, so U_t moves only when the model does."""
        return tuple(self.seed * 100_003 + index for index in range(self.k))


@dataclass(frozen=True)
class FractionLog:
    fraction: int
    chosen: str
    mean_utility: float
    tcp: float
    ntcp: float
    uncertainty: float
    satisfaction: dict[str, float]
    dose_score: float
    dvh_score: float
    recalibrated: bool
    triggered: bool
    ntcp_above_reference: bool
    filter_scaling: float
    map_scaling: float
    ess: float
    duration: float = field(default=0.0, compare=False)
    bands: tuple[DvhBand, ...] = field(default=(), compare=False, repr=False)
    belief: BeliefState | None = field(default=None, compare=False, repr=False)

    def row(self) -> dict:
        """Flat, reproducible fields; wall-clock duration stays out of the files."""
        row = {
            item.name: getattr(self, item.name)
            for item in fields(self)
            if item.name not in ("satisfaction", "duration", "bands", "belief")
        }
        row.update({f"sat:{cid}": value for cid, value in self.satisfaction.items()})
        return row


def _trigger_fired(history: list[float], factor: float, window: int) -> bool:
    """Last logged U exceeds factor x the mean of the window before it."""
    if len(history) < window + 1:
        return False
    baseline = float(np.mean(history[-window - 1 : -1]))
    return history[-1] > factor * baseline


def _observe(truth: PatientRecord, fraction: int, noise: float, seed: int, action) -> FractionObservation:
    rng = np.random.default_rng([seed, fraction])
    dose = truth.require_reference()
    names = tuple(truth.rois)
    means = np.array([masked_values(dose, truth.rois[name]).mean() for name in names])
    return FractionObservation(fraction, means + rng.normal(0.0, noise, size=means.size), names, action)


def _scenario_params(spec: ScenarioSpec, planning: PatientRecord) -> ParamVector:
    if spec.params is not None:
        return spec.params
    low, high = spec.init_range
    params = init_params(spec.features.names, spec.dropout_rate, spec.seed, low, high)
    trained, losses = train(params, [planning], spec.train_cfg, feature_cfg=spec.features)
    logger.info(f"Planning surrogate trained: loss {losses[0]:.3f} -> {losses[-1]:.5f} Gy")
    return trained


def _prior_belief(spec: ScenarioSpec, model, center: np.ndarray, t: int = 0) -> BeliefState:
    belief = init_belief(
        spec.n_particles,
        center,
        np.eye(model.state_dim) * SCENARIO_PRIOR_SPREAD**2,
        model.theta_prior,
        np.eye(model.theta_dim) * SCENARIO_PRIOR_SPREAD**2,
        seed=spec.seed * 100_003 + t,
    )
    return BeliefState(belief.x, belief.theta, belief.weights, t=t)


def _target_index(record: PatientRecord, names: tuple[str, ...]) -> int:
    targets = list(record.targets())
    return names.index(targets[0]) if targets and targets[0] in names else 0


def run_scenario(spec: ScenarioSpec, threads: int = 1, progress: bool = False) -> list[FractionLog]:
    """
    fn: run_scenario
    Description: Runs the fractionated closed loop of the twin
    Args:
        spec (ScenarioSpec): phantom, shifts, actions, constraints, utility and loop settings
        threads (int): workers for ensembles and decisions; results do not depend on it
        progress (bool): show a progress bar
    return:
        list: one FractionLog per fraction, in order
    """
    planning = generate_phantom(spec.phantom)
    surrogate = KernelSurrogate(_scenario_params(spec, planning), spec.features, threads)
    seeds = spec.ensemble_seeds
    shifts = {event.fraction_index: event for event in spec.shift_events}

    truth = planning
    observations: list[FractionObservation] = []
    history: list[float] = []
    logs: list[FractionLog] = []
    belief = None
    map_state = None
    previous_action = None

    for t in tqdm(
        range(1, spec.n_fractions + 1),
        desc="Simulating fractions",
        unit="fraction",
        bar_format=BAR_FORMAT,
        disable=not progress,
    ):
        started = time.perf_counter()
        try:
            if t in shifts:
                truth = apply_shift(truth, shifts[t])
                logger.info(f"Fraction {t}: anatomy shifted by {shifts[t].displacement} mm")
            obs = _observe(truth, t, spec.observation_noise, spec.seed, previous_action)
            observations.append(obs)

            features = surrogate.featurize(truth, reference=planning)
            scheduled = spec.recalibrate_every > 0 and t % spec.recalibrate_every == 0
            triggered = _trigger_fired(history, spec.trigger_factor, spec.trigger_window)
            if scheduled or triggered:
                surrogate = surrogate.with_params(
                    proxy_recalibrate(
                        surrogate.params,
                        truth,
                        observations[-spec.observation_window :],
                        spec.train_cfg,
                        ridge=spec.ridge,
                        features=features,
                    )
                )

            nominal = surrogate.predict(features)
            base = surrogate.ensemble(features, seeds)
            uncertainty = uncertainty_penalty(ensemble_stats(base), truth, spec.aggregation)
            ensembles = {
                action.id: base.map(lambda dose, a=action: apply_action(dose, a, spec.plan_library))
                for action in spec.actions
            }
            decision = select_action(ensembles, truth, list(spec.constraints), spec.utility, threads, spec.aggregation)
            chosen = next(action for action in spec.actions if action.id == decision.chosen)
            outcome = decision.outcome(decision.chosen)
            delivered = ScalarGrid(truth.shape, ensembles[chosen.id].values.mean(axis=0))

            # state-level diagnostic channel on the per-ROI dose-scaling model
            roi_nominal = np.array([masked_values(nominal, truth.rois[name]).mean() for name in obs.rois])
            model = dose_scaling_spec(np.maximum(roi_nominal, 1e-6), spec.process_noise, spec.observation_noise)
            if belief is None:
                map_state = np.ones(model.state_dim)
                belief = _prior_belief(spec, model, map_state)
            map_state = map_update(
                map_state, obs.action, obs, model, tolerance=spec.map_tolerance, max_iter=spec.map_iterations
            ).x
            try:
                belief = filter_update(belief, obs, model, seed=spec.seed * 100_003 + t)
            except LikelihoodUnderflowError as exc:
                logger.warning(f"{exc}; restarting the particle belief at the MAP estimate")
                belief = _prior_belief(spec, model, map_state, t)
            target = _target_index(truth, obs.rois)

            oracle = truth.require_reference()
            tcp_value = tcp(delivered, truth.target_union(), spec.utility)
            ntcp_value = max_ntcp(delivered, truth, spec.utility)
            bands = tuple(
                dvh_band(ensembles[chosen.id], mask, name=name) for name, mask in truth.rois.items()
            )
            log = FractionLog(
                fraction=t,
                chosen=chosen.id,
                mean_utility=outcome.mean_utility,
                tcp=tcp_value,
                ntcp=ntcp_value,
                uncertainty=uncertainty,
                satisfaction=dict(outcome.satisfaction),
                dose_score=dose_score(nominal, oracle, truth.feasible),
                dvh_score=dvh_score(nominal, oracle, truth),
                recalibrated=scheduled or triggered,
                triggered=triggered,
                ntcp_above_reference=ntcp_value > spec.ntcp_reference,
                filter_scaling=float(belief_mean(belief)[0][target]),
                map_scaling=float(map_state[target]),
                ess=belief.ess,
                duration=time.perf_counter() - started,
                bands=bands,
                belief=belief,
            )
        except RtwinError as exc:
            raise FractionError(t, exc) from exc
        logs.append(log)
        history.append(uncertainty)
        previous_action = chosen.as_vector()
        logger.info(
            f"Fraction {t}: chose {log.chosen}, U={uncertainty:.3f} Gy, "
            f"TCP={tcp_value:.3f}, NTCP={ntcp_value:.3f}{' (recalibrated)' if log.recalibrated else ''}"
        )
    return logs


# ---- output ----


def logs_frame(logs: list[FractionLog]) -> pd.DataFrame:
    return pd.DataFrame([log.row() for log in logs])


def trajectory_frame(logs: list[FractionLog]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "t": [log.fraction for log in logs],
            "tcp": [log.tcp for log in logs],
            "ntcp": [log.ntcp for log in logs],
            "uncertainty": [log.uncertainty for log in logs],
        }
    )


def write_scenario(logs: list[FractionLog], out_dir: str) -> list[str]:
    """Writes fractions.csv/json, trajectory.csv, dvh_bands.csv and belief.csv; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        name: os.path.join(out_dir, name)
        for name in ("fractions.csv", "fractions.json", "trajectory.csv", "dvh_bands.csv", "belief.csv")
    }
    logs_frame(logs).to_csv(paths["fractions.csv"], index=False)
    with open(paths["fractions.json"], "w") as f:
        json.dump(
            [{**log.row(), "satisfaction": log.satisfaction} for log in logs],
            f,
            indent=2,
        )
    trajectory_frame(logs).to_csv(paths["trajectory.csv"], index=False)
    bands = [bands_frame(list(log.bands), fraction=log.fraction) for log in logs if log.bands]
    if bands:
        pd.concat(bands, ignore_index=True).to_csv(paths["dvh_bands.csv"], index=False)
    beliefs = [belief_frame(log.belief) for log in logs if log.belief is not None]
    if beliefs:
        pd.concat(beliefs, ignore_index=True).to_csv(paths["belief.csv"], index=False)
    return [path for path in paths.values() if os.path.exists(path)]


# ---- cohort benchmark ----


@dataclass(frozen=True)
class CohortBenchmark:
    rows: pd.DataFrame
    skipped: tuple[str, ...] = ()

    @property
    def table(self) -> pd.DataFrame:
        """Per-patient rows followed by mean and std (sample) rows."""
        numeric = self.rows.drop(columns=["patient"])
        summary = pd.DataFrame(
            [
                {"patient": "mean", **numeric.mean().to_dict()},
                {"patient": "std", **numeric.std(ddof=1).to_dict()},
            ]
        )
        return pd.concat([self.rows, summary], ignore_index=True)

    def to_csv(self, path: str):
        self.table.to_csv(path, index=False)


def benchmark_cohort(
    patients: list[PatientRecord],
    params: ParamVector,
    specs: list[DvhMetricSpec] | None = None,
    feature_cfg: FeatureConfig | None = None,
    progress: bool = False,
) -> CohortBenchmark:
    """
    fn: benchmark_cohort
    Description: Deterministic dose and DVH scores of the surrogate on every patient
    Args:
        patients (list): PatientRecords, those without a reference dose are skipped
        params (ParamVector): surrogate parameters
        specs (list, optional): DVH metrics; defaults to the per-patient benchmark set
        feature_cfg (FeatureConfig, optional): channels; defaults to the ones params are named after
    return:
        CohortBenchmark: per-patient rows, aggregates and the skipped ids
    """
    if feature_cfg is None:
        surrogate = KernelSurrogate.from_params(params)
    else:
        surrogate = KernelSurrogate(params, feature_cfg)
    rows, skipped = [], []
    for patient in tqdm(
        patients, desc="Scoring cohort", unit="patients", bar_format=BAR_FORMAT, disable=not progress
    ):
        started = time.perf_counter()
        try:
            reference = patient.require_reference()
        except MissingReferenceDoseError:
            logger.warning(f"Patient {patient.id} has no reference dose, skipped")
            skipped.append(patient.id)
            continue
        pred = surrogate.predict(surrogate.featurize(patient))
        rows.append(
            {
                "patient": patient.id,
                "dose_score": dose_score(pred, reference, patient.feasible),
                "dvh_score": dvh_score(pred, reference, patient, specs),
                "seconds": time.perf_counter() - started,
            }
        )
    if skipped:
        logger.warning(f"{len(skipped)} of {len(patients)} patients skipped")
    frame = pd.DataFrame(rows, columns=["patient", "dose_score", "dvh_score", "seconds"])
    return CohortBenchmark(frame, tuple(skipped))

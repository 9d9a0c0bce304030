"""
    Chance-constrained action selection over sampled dose ensembles with the
    schematic utility TCP - lambda * NTCP - gamma * U.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from rtwin.errors import EmptyMaskError, InfeasibleActionError, ShapeMismatchError, ValidationError
from rtwin.grid_core import MaskGrid, PatientRecord, ScalarGrid, masked_values
from rtwin.settings.config import (
    MAX_MODULATION,
    MIN_RECOMMENDED_K,
    MIN_SAMPLES_PER_ALPHA,
    NTCP_GAMMA50,
    NTCP_M,
    NTCP_MODEL,
    NTCP_N,
    NTCP_TD50,
    SCALE_BOUNDS,
    TCP_ALPHA,
    TCP_CLONOGENS,
    UNCERTAINTY_AGGREGATION,
    UTILITY_GAMMA,
    UTILITY_LAMBDA,
)
from rtwin.uq_metrics import (
    DoseEnsemble,
    DvhMetricSpec,
    dvh_metric,
    ensemble_stats,
    uncertainty_penalty,
)

logger = logging.getLogger(__name__)

ACTION_KINDS = ("plan_select", "spatial_mask", "scale")
NTCP_MODELS = ("lkb", "logistic")


@dataclass(frozen=True)
class ActionSpec:
    """
    One candidate adaptation. kind selects the payload: plan_index for
    plan_select, factors (per-voxel multipliers) for spatial_mask, scale for
    scale.
    """

    id: str
    kind: str = "scale"
    scale: float = 1.0
    plan_index: int = 0
    factors: ScalarGrid | None = None
    bounds: tuple[float, float] = SCALE_BOUNDS
    max_factor: float = MAX_MODULATION

    def __post_init__(self):
        low, high = self.bounds
        if not 0 < low <= 1 <= high:
            raise ValidationError(f"Scale bounds must satisfy 0 < low <= 1 <= high, got {self.bounds}")
        match self.kind:
            case "scale":
                if not low <= self.scale <= high:
                    raise ValidationError(f"{self.id}: scale {self.scale} outside [{low}, {high}]")
            case "plan_select":
                if self.plan_index < 0:
                    raise ValidationError(f"{self.id}: plan index must be >= 0")
            case "spatial_mask":
                if self.factors is None:
                    raise ValidationError(f"{self.id}: spatial mask needs per-voxel factors")
                if np.any(self.factors.values < 0) or np.any(self.factors.values > self.max_factor):
                    raise ValidationError(f"{self.id}: modulation factors must lie in [0, {self.max_factor}]")
            case _:
                raise ValidationError(f"{self.id}: unknown action kind '{self.kind}'")

    @classmethod
    def identity(cls, id: str = "identity") -> "ActionSpec":
        return cls(id=id, kind="scale", scale=1.0)

    def as_vector(self) -> np.ndarray:
        """Numeric summary handed to the state-space transition."""
        match self.kind:
            case "scale":
                return np.array([self.scale])
            case "plan_select":
                return np.array([float(self.plan_index)])
            case _:
                return np.array([float(self.factors.values.mean())])


@dataclass(frozen=True)
class ConstraintSpec:
    id: str
    metric: DvhMetricSpec
    comparator: str
    threshold: float
    alpha: float

    def __post_init__(self):
        if self.comparator not in ("<=", ">="):
            raise ValidationError(f"{self.id}: comparator must be '<=' or '>=', got '{self.comparator}'")
        if not math.isfinite(self.threshold):
            raise ValidationError(f"{self.id}: threshold must be finite")
        if not 0 < self.alpha <= 0.5:
            raise ValidationError(f"{self.id}: alpha must lie in (0, 0.5], got {self.alpha}")

    def holds(self, value: float) -> bool:
        if self.comparator == "<=":
            return value <= self.threshold
        return value >= self.threshold

    def required(self, k: int) -> int:
        """Members that must satisfy the constraint out of k."""
        return math.ceil((1.0 - self.alpha) * k - 1e-9)


@dataclass(frozen=True)
class UtilityConfig:
    ntcp_weight: float = UTILITY_LAMBDA
    uncertainty_weight: float = UTILITY_GAMMA
    alpha_rad: float = TCP_ALPHA
    clonogens: float = TCP_CLONOGENS
    td50: float = NTCP_TD50
    m: float = NTCP_M
    n: float = NTCP_N
    ntcp_model: str = NTCP_MODEL
    gamma50: float = NTCP_GAMMA50

    def __post_init__(self):
        if self.ntcp_weight < 0 or self.uncertainty_weight < 0 or self.alpha_rad < 0:
            raise ValidationError("Utility weights and radiosensitivity must be non-negative")
        if self.clonogens < 1:
            raise ValidationError("Clonogen number must be >= 1")
        if self.td50 <= 0 or self.m <= 0 or self.gamma50 <= 0:
            raise ValidationError("TD50, m and gamma50 must be positive")
        if not 0 < self.n <= 1:
            raise ValidationError(f"Volume exponent n must lie in (0, 1], got {self.n}")
        if self.ntcp_model not in NTCP_MODELS:
            raise ValidationError(f"Unknown NTCP model '{self.ntcp_model}', expected one of {NTCP_MODELS}")


@dataclass(frozen=True)
class ActionOutcome:
    id: str
    mean_utility: float
    satisfaction: dict[str, float]
    feasible: bool
    uncertainty: float
    worst: tuple[str, float] | None = None


@dataclass(frozen=True)
class DecisionResult:
    chosen: str
    outcomes: tuple[ActionOutcome, ...]
    k: int
    seeds: tuple[int, ...] = field(default=())

    def outcome(self, action_id: str) -> ActionOutcome:
        for outcome in self.outcomes:
            if outcome.id == action_id:
                return outcome
        raise KeyError(action_id)

    def to_dict(self) -> dict:
        return {
            "chosen": self.chosen,
            "k": self.k,
            "seeds": list(self.seeds),
            "actions": [
                {
                    "id": o.id,
                    "mean_utility": o.mean_utility,
                    "uncertainty": o.uncertainty,
                    "feasible": o.feasible,
                    "satisfaction": dict(o.satisfaction),
                }
                for o in self.outcomes
            ],
        }


def apply_action(dose: ScalarGrid, action: ActionSpec, plan_library=()) -> ScalarGrid:
    """
    fn: apply_action
    Description: Applies one candidate adaptation to a dose grid
    Args:
        dose (ScalarGrid): current dose
        action (ActionSpec): the adaptation
        plan_library (list): alternative plans for plan_select
    return:
        ScalarGrid: adapted dose, clamped at 0
    """
    match action.kind:
        case "plan_select":
            if not 0 <= action.plan_index < len(plan_library):
                raise ValidationError(
                    f"{action.id}: plan index {action.plan_index} outside a library of {len(plan_library)}"
                )
            plan = plan_library[action.plan_index]
            if not plan.shape.same_layout(dose.shape):
                raise ShapeMismatchError(f"{action.id}: library plan grid differs from the dose grid")
            adapted = plan.values
        case "spatial_mask":
            if not action.factors.shape.same_layout(dose.shape):
                raise ShapeMismatchError(f"{action.id}: modulation grid differs from the dose grid")
            adapted = dose.values * action.factors.values
        case _:
            adapted = dose.values * action.scale
    return dose.with_values(np.maximum(adapted, 0.0))


def _nonempty(dose: ScalarGrid, mask: MaskGrid, label: str) -> np.ndarray:
    if mask.is_empty():
        raise EmptyMaskError(f"{label} needs a nonempty ROI")
    return masked_values(dose, mask)


def tcp(dose: ScalarGrid, target: MaskGrid, cfg: UtilityConfig) -> float:
    """Poisson TCP: exp(-N0 * mean over target of exp(-alpha * d))."""
    doses = _nonempty(dose, target, "TCP")
    surviving = np.mean(np.exp(-cfg.alpha_rad * doses))
    return float(np.exp(-cfg.clonogens * surviving))


def geud(doses: np.ndarray, n: float) -> float:
    return float(np.mean(doses ** (1.0 / n)) ** n)


def ntcp(dose: ScalarGrid, oar: MaskGrid, cfg: UtilityConfig) -> float:
    """LKB probit (or logistic EUD) NTCP on the generalized EUD of the OAR."""
    eud = geud(_nonempty(dose, oar, "NTCP"), cfg.n)
    match cfg.ntcp_model:
        case "lkb":
            return float(norm.cdf((eud - cfg.td50) / (cfg.m * cfg.td50)))
        case _:
            if eud <= 0:
                return 0.0
            return float(1.0 / (1.0 + (cfg.td50 / eud) ** (4.0 * cfg.gamma50)))


def max_ntcp(dose: ScalarGrid, record: PatientRecord, cfg: UtilityConfig) -> float:
    oars = record.oars()
    if not oars:
        return 0.0
    return max(ntcp(dose, mask, cfg) for mask in oars.values())


def utility(dose: ScalarGrid, record: PatientRecord, u_penalty: float, cfg: UtilityConfig) -> float:
    """TCP - lambda * max-over-OARs NTCP - gamma * u_penalty."""
    if not record.targets():
        raise ValidationError(f"Patient {record.id} has no target ROI")
    target_tcp = tcp(dose, record.target_union(), cfg)
    return target_tcp - cfg.ntcp_weight * max_ntcp(dose, record, cfg) - cfg.uncertainty_weight * u_penalty


def constraint_value(dose: ScalarGrid, record: PatientRecord, constraint: ConstraintSpec) -> float:
    roi = record.rois.get(constraint.metric.roi)
    if roi is None:
        raise ValidationError(f"{constraint.id}: ROI '{constraint.metric.roi}' not on patient {record.id}")
    return dvh_metric(dose, roi, constraint.metric, record.shape.voxel_volume_cc)


def _evaluate_member(member, record, u_penalty, constraints, cfg):
    return (
        utility(member, record, u_penalty, cfg),
        [constraint.holds(constraint_value(member, record, constraint)) for constraint in constraints],
    )


def select_action(
    ensemble_per_action: dict[str, DoseEnsemble],
    record: PatientRecord,
    constraints: list[ConstraintSpec],
    cfg: UtilityConfig,
    threads: int = 1,
    aggregation: str = UNCERTAINTY_AGGREGATION,
) -> DecisionResult:
    """
    fn: select_action
    Description: Sample-average chance-constrained selection over a finite action set
    Args:
        ensemble_per_action (dict): action id -> DoseEnsemble, in action id order
        record (PatientRecord): anatomy for TCP, NTCP and constraint ROIs
        constraints (list): ConstraintSpecs
        cfg (UtilityConfig): utility weights and model parameters
        threads (int): workers for (action, member) evaluation
        aggregation (str): voxelwise std aggregation for U
    return:
        DecisionResult: feasible action with the highest mean utility, ties to the smallest id
    """
    if not ensemble_per_action:
        raise ValidationError("No candidate actions")
    ensembles = list(ensemble_per_action.items())
    k = ensembles[0][1].k
    shape = ensembles[0][1].shape
    for action_id, ensemble in ensembles:
        if ensemble.k != k or not ensemble.shape.same_layout(shape):
            raise ShapeMismatchError(f"Ensemble of {action_id} differs in size or grid")
    if k < MIN_RECOMMENDED_K:
        logger.warning(f"Deciding on K={k} samples (>= {MIN_RECOMMENDED_K} recommended)")
    if constraints and k * min(c.alpha for c in constraints) < MIN_SAMPLES_PER_ALPHA:
        logger.warning(
            f"K * min(alpha) = {k * min(c.alpha for c in constraints):.2f} < {MIN_SAMPLES_PER_ALPHA}: "
            "constraint estimates are coarse"
        )

    penalties = {
        action_id: (uncertainty_penalty(ensemble_stats(ensemble), record, aggregation) if k > 1 else 0.0)
        for action_id, ensemble in ensembles
    }
    jobs = [(action_id, member) for action_id, ensemble in ensembles for member in ensemble.members]
    with ThreadPoolExecutor(max(threads, 1)) as executor:
        futures = [
            executor.submit(_evaluate_member, member, record, penalties[action_id], constraints, cfg)
            for action_id, member in jobs
        ]
        results = [future.result() for future in futures]

    outcomes = []
    for position, (action_id, _ensemble) in enumerate(ensembles):
        block = results[position * k : (position + 1) * k]
        counts = np.sum([holds for _, holds in block], axis=0) if constraints else []
        satisfaction = {c.id: int(count) / k for c, count in zip(constraints, counts, strict=True)}
        feasible = all(int(count) >= c.required(k) for c, count in zip(constraints, counts, strict=True))
        worst = None
        if constraints:
            gaps = [(c.id, satisfaction[c.id] - (1.0 - c.alpha)) for c in constraints]
            worst = min(gaps, key=lambda gap: gap[1])
        outcomes.append(
            ActionOutcome(
                id=action_id,
                mean_utility=float(np.mean([value for value, _ in block])),
                satisfaction=satisfaction,
                feasible=feasible,
                uncertainty=penalties[action_id],
                worst=worst,
            )
        )

    feasible = [outcome for outcome in outcomes if outcome.feasible]
    if not feasible:
        raise InfeasibleActionError({o.id: o.worst for o in outcomes})
    best = max(outcome.mean_utility for outcome in feasible)
    chosen = min((o for o in feasible if o.mean_utility == best), key=lambda o: o.id)
    logger.debug(f"Chose {chosen.id} (mean utility {chosen.mean_utility:.4f}) among {len(outcomes)} actions")
    return DecisionResult(chosen.id, tuple(outcomes), k, ensembles[0][1].seeds)


# ---- configuration entries ----


def parse_actions(entries: list[dict], record: PatientRecord | None = None, bounds=SCALE_BOUNDS) -> list[ActionSpec]:
    """
    Builds actions from config entries such as {id: down, kind: scale,
    scale: 0.9}, {id: alt, kind: plan_select, index: 1} or {id: spare,
    kind: spatial_mask, roi: SpinalCord, factor: 0.8}.
    """
    actions = []
    for entry in entries:
        entry = dict(entry)
        kind = entry.get("kind", "scale")
        action_id = str(entry.get("id", f"{kind}_{len(actions)}"))
        match kind:
            case "scale":
                actions.append(ActionSpec(action_id, kind, scale=float(entry.get("scale", 1.0)), bounds=bounds))
            case "plan_select":
                actions.append(ActionSpec(action_id, kind, plan_index=int(entry.get("index", 0)), bounds=bounds))
            case "spatial_mask":
                if record is None:
                    raise ValidationError(f"{action_id}: spatial masks need a patient to resolve ROIs")
                roi = record.rois.get(entry.get("roi"))
                if roi is None:
                    raise ValidationError(f"{action_id}: unknown ROI '{entry.get('roi')}'")
                factors = np.where(roi.membership, float(entry.get("factor", 1.0)), 1.0)
                actions.append(
                    ActionSpec(action_id, kind, factors=ScalarGrid(record.shape, factors, unit="1"), bounds=bounds)
                )
            case _:
                raise ValidationError(f"{action_id}: unknown action kind '{kind}'")
    ids = [action.id for action in actions]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"Action ids must be unique, got {ids}")
    return actions


def parse_constraints(entries: list[dict]) -> list[ConstraintSpec]:
    """Entries like {id: cord, metric: 'SpinalCord:D_0.1cc', comparator: '<=', threshold: 45, alpha: 0.1}."""
    constraints = []
    for index, entry in enumerate(entries):
        try:
            constraints.append(
                ConstraintSpec(
                    id=str(entry.get("id", f"c{index}")),
                    metric=DvhMetricSpec.parse(str(entry["metric"])),
                    comparator=str(entry.get("comparator", "<=")),
                    threshold=float(entry["threshold"]),
                    alpha=float(entry.get("alpha", 0.1)),
                )
            )
        except KeyError as exc:
            raise ValidationError(f"Constraint {index} is missing {exc}") from exc
    return constraints

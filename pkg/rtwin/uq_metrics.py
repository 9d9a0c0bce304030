"""
    Ensemble statistics, dose-volume histograms with predictive bands, and
    the benchmark dose and DVH scores.
"""

import logging
import math
import re
from dataclasses import dataclass

import numpy as np
import pandas as pd

from rtwin.errors import EmptyMaskError, ShapeMismatchError, ValidationError
from rtwin.grid_core import GridShape, MaskGrid, PatientRecord, Role, ScalarGrid, masked_values
from rtwin.settings.config import BAND_CONFIDENCE, N_DVH_LEVELS, UNCERTAINTY_AGGREGATION

logger = logging.getLogger(__name__)

AGGREGATIONS = ("target_mean", "target_max", "feasible_mean")


@dataclass(frozen=True)
class DoseEnsemble:
    """K stochastic dose grids stacked as an array of shape (K, nx, ny, nz)."""

    shape: GridShape
    values: np.ndarray
    seeds: tuple[int, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 4 or values.shape[1:] != self.shape.dims:
            raise ShapeMismatchError(f"Ensemble members must all have shape {self.shape.dims}")
        if values.shape[0] != len(self.seeds):
            raise ValidationError(f"{values.shape[0]} members but {len(self.seeds)} seeds")
        if values.shape[0] < 1:
            raise ValidationError("An ensemble needs at least one member")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @classmethod
    def from_members(cls, members: list[ScalarGrid], seeds) -> "DoseEnsemble":
        if not members:
            raise ValidationError("An ensemble needs at least one member")
        shape = members[0].shape
        for member in members:
            if not member.shape.same_layout(shape):
                raise ShapeMismatchError("Ensemble members have different shapes")
        return cls(shape, np.stack([member.values for member in members]), tuple(seeds))

    @property
    def k(self) -> int:
        return self.values.shape[0]

    def member(self, index: int) -> ScalarGrid:
        return ScalarGrid(self.shape, self.values[index])

    @property
    def members(self) -> list[ScalarGrid]:
        return [self.member(index) for index in range(self.k)]

    def map(self, fn) -> "DoseEnsemble":
        """Applies fn (ScalarGrid -> ScalarGrid) to every member."""
        return DoseEnsemble.from_members([fn(member) for member in self.members], self.seeds)


@dataclass(frozen=True)
class EnsembleStats:
    mean: ScalarGrid
    variance: ScalarGrid
    std: ScalarGrid


def ensemble_stats(ensemble: DoseEnsemble) -> EnsembleStats:
    """Voxelwise mean and unbiased (K - 1) variance."""
    if ensemble.k < 2:
        raise ValidationError(f"Variance needs at least two members, got {ensemble.k}")
    mean = ensemble.values.mean(axis=0)
    variance = ((ensemble.values - mean) ** 2).sum(axis=0) / (ensemble.k - 1)
    shape = ensemble.shape
    return EnsembleStats(
        mean=ScalarGrid(shape, mean),
        variance=ScalarGrid(shape, variance, unit="Gy2"),
        std=ScalarGrid(shape, np.sqrt(variance)),
    )


def dose_score(pred: ScalarGrid, ref: ScalarGrid, feasible: MaskGrid) -> float:
    """Mean absolute voxel difference (Gy) over the feasible mask."""
    if not pred.shape.same_layout(ref.shape):
        raise ShapeMismatchError("Prediction and reference grids differ")
    if feasible.is_empty():
        raise EmptyMaskError("Dose score needs a nonempty feasible mask")
    return float(np.mean(np.abs(masked_values(pred, feasible) - masked_values(ref, feasible))))


# ---- DVH ----


@dataclass(frozen=True)
class DvhCurve:
    roi: str
    levels: np.ndarray
    volume: np.ndarray


@dataclass(frozen=True)
class DvhMetricSpec:
    """
    roi plus one of: kind "D" with parameter x (percent volume), kind "mean",
    kind "Dcc" with parameter the hot-spot volume in cc.
    """

    roi: str
    kind: str
    parameter: float = 0.0

    def __post_init__(self):
        match self.kind:
            case "D":
                if not 0 < self.parameter <= 100:
                    raise ValidationError(f"D_x needs x in (0, 100], got {self.parameter}")
            case "Dcc":
                if not self.parameter > 0:
                    raise ValidationError(f"D_cc needs a positive volume, got {self.parameter}")
            case "mean":
                pass
            case _:
                raise ValidationError(f"Unknown DVH metric kind '{self.kind}'")

    @property
    def label(self) -> str:
        match self.kind:
            case "D":
                return f"{self.roi}:D{self.parameter:g}"
            case "Dcc":
                return f"{self.roi}:D_{self.parameter:g}cc"
            case _:
                return f"{self.roi}:mean"

    @classmethod
    def parse(cls, text: str) -> "DvhMetricSpec":
        """Parses labels such as 'PTV:D95', 'Brainstem:D_0.1cc' or 'Larynx:mean'."""
        roi, sep, metric = text.rpartition(":")
        if not sep or not roi:
            raise ValidationError(f"DVH metric '{text}' must look like ROI:METRIC")
        if metric == "mean":
            return cls(roi, "mean")
        if found := re.fullmatch(r"D_?([0-9]+(?:\.[0-9]+)?)cc", metric):
            return cls(roi, "Dcc", float(found.group(1)))
        if found := re.fullmatch(r"D([0-9]+(?:\.[0-9]+)?)", metric):
            return cls(roi, "D", float(found.group(1)))
        raise ValidationError(f"Unrecognised DVH metric '{metric}'")


def _roi_doses(dose: ScalarGrid, roi: MaskGrid) -> np.ndarray:
    if roi.is_empty():
        raise EmptyMaskError("DVH of an empty ROI is undefined")
    return masked_values(dose, roi)


def _volume_at(sorted_doses: np.ndarray, levels: np.ndarray) -> np.ndarray:
    n = sorted_doses.size
    return (n - np.searchsorted(sorted_doses, levels, side="left")) / n


def dvh(dose: ScalarGrid, roi: MaskGrid, n_levels: int = N_DVH_LEVELS, name: str = "") -> DvhCurve:
    """Fraction of ROI voxels receiving at least each of n_levels doses from 0 to the ROI maximum."""
    if n_levels < 2:
        raise ValidationError("A DVH needs at least two dose levels")
    doses = np.sort(_roi_doses(dose, roi))
    levels = np.linspace(0.0, doses[-1], n_levels)
    return DvhCurve(name, levels, _volume_at(doses, levels))


def _rank(fraction_times_n: float) -> int:
    # guards against 0.95 * 100 landing a hair above 95
    return max(1, math.ceil(round(fraction_times_n, 9)))


def dvh_metric(dose: ScalarGrid, roi: MaskGrid, spec: DvhMetricSpec, voxel_volume: float) -> float:
    """
    fn: dvh_metric
    Description: Evaluates one DVH summary by exact order statistics
    Args:
        dose (ScalarGrid): dose grid (Gy)
        roi (MaskGrid): ROI voxels
        spec (DvhMetricSpec): metric to evaluate
        voxel_volume (float): volume of one voxel (cc)
    return:
        float: metric value (Gy)
    """
    doses = _roi_doses(dose, roi)
    n = doses.size
    match spec.kind:
        case "mean":
            return float(doses.mean())
        case "D":
            rank = _rank(spec.parameter * n / 100.0)
        case "Dcc":
            rank = _rank(spec.parameter / voxel_volume)
            if rank > n:
                raise ValidationError(
                    f"{spec.label}: {spec.parameter} cc exceeds the ROI volume of {n * voxel_volume:g} cc"
                )
    descending = np.sort(doses)[::-1]
    return float(descending[min(rank, n) - 1])


def default_dvh_specs(record: PatientRecord) -> list[DvhMetricSpec]:
    specs = []
    for name, role in record.roles.items():
        if role is Role.TARGET:
            specs += [DvhMetricSpec(name, "D", x) for x in (1.0, 95.0, 99.0)]
        else:
            specs += [DvhMetricSpec(name, "mean"), DvhMetricSpec(name, "Dcc", 0.1)]
    return specs


def _resolvable(record: PatientRecord, spec: DvhMetricSpec) -> bool:
    roi = record.rois.get(spec.roi)
    if roi is None or roi.is_empty():
        logger.warning(f"Patient {record.id}: skipping {spec.label}, ROI missing")
        return False
    if spec.kind == "Dcc" and _rank(spec.parameter / record.shape.voxel_volume_cc) > roi.count:
        logger.warning(f"Patient {record.id}: skipping {spec.label}, ROI smaller than the hot-spot volume")
        return False
    return True


def dvh_metric_table(
    pred: ScalarGrid, ref: ScalarGrid, record: PatientRecord, specs: list[DvhMetricSpec]
) -> pd.DataFrame:
    """Per-metric predicted and reference values for the resolvable specs."""
    volume = record.shape.voxel_volume_cc
    rows = []
    for spec in specs:
        if not _resolvable(record, spec):
            continue
        roi = record.rois[spec.roi]
        predicted = dvh_metric(pred, roi, spec, volume)
        reference = dvh_metric(ref, roi, spec, volume)
        rows.append((spec.label, predicted, reference, abs(predicted - reference)))
    return pd.DataFrame(rows, columns=["metric", "predicted", "reference", "abs_diff"])


def dvh_score(
    pred: ScalarGrid, ref: ScalarGrid, record: PatientRecord, specs: list[DvhMetricSpec] | None = None
) -> float:
    """Mean absolute DVH-metric difference (Gy) over the resolvable specs."""
    specs = default_dvh_specs(record) if specs is None else specs
    table = dvh_metric_table(pred, ref, record, specs)
    if table.empty:
        raise ValidationError(f"Patient {record.id}: no DVH metric could be evaluated")
    return float(table.abs_diff.mean())


@dataclass(frozen=True)
class DvhBand:
    roi: str
    levels: np.ndarray
    lower: np.ndarray
    mean: np.ndarray
    upper: np.ndarray


def _nearest_rank(sorted_rows: np.ndarray, percentile: float) -> np.ndarray:
    k = sorted_rows.shape[0]
    rank = min(_rank(percentile * k / 100.0), k)
    return sorted_rows[rank - 1]


def dvh_band(
    ensemble: DoseEnsemble,
    roi: MaskGrid,
    n_levels: int = N_DVH_LEVELS,
    confidence: float = BAND_CONFIDENCE,
    name: str = "",
) -> DvhBand:
    """
    Pointwise nearest-rank percentile band of the member DVHs plus the DVH
    of the ensemble-mean dose. The band is widened to contain the mean curve.
    """
    if ensemble.k < 2:
        raise ValidationError(f"A DVH band needs at least two members, got {ensemble.k}")
    if roi.is_empty():
        raise EmptyMaskError("DVH band of an empty ROI is undefined")
    if not 0 < confidence < 100:
        raise ValidationError("Band confidence must be in (0, 100)")
    indices = roi.indices()
    flat = ensemble.values.reshape(ensemble.k, -1, order="F")[:, indices]
    member_doses = np.sort(flat, axis=1)
    levels = np.linspace(0.0, member_doses[:, -1].max(), n_levels)
    curves = np.sort(np.stack([_volume_at(row, levels) for row in member_doses]), axis=0)
    tail = (100.0 - confidence) / 2.0
    lower = _nearest_rank(curves, tail)
    upper = _nearest_rank(curves, 100.0 - tail)
    mean_curve = _volume_at(np.sort(flat.mean(axis=0)), levels)
    return DvhBand(
        name,
        levels,
        np.minimum(lower, mean_curve),
        mean_curve,
        np.maximum(upper, mean_curve),
    )


def uncertainty_summary(stats: EnsembleStats, roi: MaskGrid) -> float:
    """Mean voxel standard deviation (Gy) over the ROI."""
    if roi.is_empty():
        raise EmptyMaskError("Uncertainty summary over an empty ROI")
    return float(masked_values(stats.std, roi).mean())


def uncertainty_penalty(
    stats: EnsembleStats, record: PatientRecord, aggregation: str = UNCERTAINTY_AGGREGATION
) -> float:
    match aggregation:
        case "target_mean":
            return uncertainty_summary(stats, record.target_union())
        case "target_max":
            return float(masked_values(stats.std, record.target_union()).max())
        case "feasible_mean":
            return uncertainty_summary(stats, record.feasible)
        case _:
            raise ValidationError(f"Unknown uncertainty aggregation '{aggregation}'")


# ---- CSV emission ----


def curves_frame(curves: list[DvhCurve]) -> pd.DataFrame:
    return pd.concat(
        [pd.DataFrame({"roi": c.roi, "dose_gy": c.levels, "volume": c.volume}) for c in curves],
        ignore_index=True,
    )


def bands_frame(bands: list[DvhBand], **labels) -> pd.DataFrame:
    frames = []
    for band in bands:
        frame = pd.DataFrame(
            {
                "roi": band.roi,
                "dose_gy": band.levels,
                "lower": band.lower,
                "mean": band.mean,
                "upper": band.upper,
            }
        )
        for column, value in labels.items():
            frame.insert(0, column, value)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)

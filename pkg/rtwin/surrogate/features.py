"""
    Hand-built spatial feature channels the kernel surrogate combines into
    a dose prediction.
"""

import logging
from dataclasses import dataclass

import numpy as np

from rtwin.errors import ShapeMismatchError, ValidationError
from rtwin.geometry import signed_distance, smooth
from rtwin.grid_core import GridShape, PatientRecord
from rtwin.phantom import oracle_dose
from rtwin.settings.config import DISTANCE_SCALE_MM, SMOOTHING_SCALES_MM

logger = logging.getLogger(__name__)


def _scale(name: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ValidationError(f"Feature channel '{name}' has no valid scale") from None


@dataclass(frozen=True)
class FeatureConfig:
    """
    Which channels featurize produces, in this order: signed distance per
    ROI in distance_rois, smoothed CT and smoothed target mask per smoothing
    scale, target falloff per width, the anatomy-drift channel, the bias.
    The falloff channel is the phantom's own dose kernel and stays off
    unless asked for.
    """

    distance_rois: tuple[str, ...] = ()
    smoothing_scales: tuple[float, ...] = SMOOTHING_SCALES_MM
    falloff_widths: tuple[float, ...] = ()
    include_drift: bool = False
    include_bias: bool = True
    distance_scale: float = DISTANCE_SCALE_MM

    @classmethod
    def from_names(cls, names, distance_scale: float = DISTANCE_SCALE_MM) -> "FeatureConfig":
        """Rebuilds the configuration whose channels carry these names, e.g. from a parameter file."""
        names = tuple(names)
        rois, scales, widths = [], [], []
        for name in names:
            kind, _, value = name.partition(":")
            match kind:
                case "sdf" if value:
                    rois.append(value)
                case "ct":
                    scales.append(_scale(name, value))
                case "target":
                    _scale(name, value)
                case "falloff":
                    widths.append(_scale(name, value))
                case "drift" | "bias" if not value:
                    pass
                case _:
                    raise ValidationError(f"Unknown feature channel '{name}'")
        cfg = cls(
            tuple(rois),
            tuple(scales),
            tuple(widths),
            include_drift="drift" in names,
            include_bias="bias" in names,
            distance_scale=distance_scale,
        )
        if cfg.names != names:
            raise ValidationError(f"Feature channels {list(names)} are not in featurize order")
        return cfg

    def __post_init__(self):
        for name in ("distance_rois", "smoothing_scales", "falloff_widths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if any(scale <= 0 for scale in self.smoothing_scales):
            raise ValidationError("Smoothing scales must be positive")
        if any(width <= 0 for width in self.falloff_widths):
            raise ValidationError("Falloff widths must be positive")
        if self.distance_scale <= 0:
            raise ValidationError("Distance scale must be positive")
        if self.n_features < 1:
            raise ValidationError("Feature configuration produces no features")

    @property
    def names(self) -> tuple[str, ...]:
        names = [f"sdf:{roi}" for roi in self.distance_rois]
        for scale in self.smoothing_scales:
            names += [f"ct:{scale:g}", f"target:{scale:g}"]
        names += [f"falloff:{width:g}" for width in self.falloff_widths]
        if self.include_drift:
            names.append("drift")
        if self.include_bias:
            names.append("bias")
        return tuple(names)

    @property
    def n_features(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class FeatureStack:
    shape: GridShape
    names: tuple[str, ...]
    values: np.ndarray  # (F, nx, ny, nz)

    def __post_init__(self):
        if self.values.shape != (len(self.names), *self.shape.dims):
            raise ShapeMismatchError(
                f"Feature array {self.values.shape} does not match {len(self.names)} x {self.shape.dims}"
            )
        self.values.flags.writeable = False

    def __len__(self) -> int:
        return len(self.names)


def featurize(
    record: PatientRecord, cfg: FeatureConfig, reference: PatientRecord | None = None
) -> FeatureStack:
    """
    fn: featurize
    Description: Computes the feature channels of a patient
    Args:
        record (PatientRecord): current anatomy
        cfg (FeatureConfig): channel selection
        reference (PatientRecord, optional): planning anatomy for the drift
            channel; defaults to record itself (drift is then zero)
    return:
        FeatureStack: F channels in cfg.names order
    """
    shape = record.shape
    dims = shape.voxel_dims
    channels = []

    for roi in cfg.distance_rois:
        if roi in record.rois and not record.rois[roi].is_empty():
            channels.append(signed_distance(record.rois[roi].membership, dims) / cfg.distance_scale)
        else:
            logger.warning(f"Patient {record.id} has no ROI '{roi}', distance feature set to 0")
            channels.append(np.zeros(shape.dims))

    if cfg.smoothing_scales:
        target = record.target_union().membership.astype(np.float64)
        ct = record.ct.values / 1000.0
        for scale in cfg.smoothing_scales:
            channels.append(smooth(ct, dims, scale))
            channels.append(smooth(target, dims, scale))

    for width in cfg.falloff_widths:
        channels.append(np.array(oracle_dose(record, width).values))

    if cfg.include_drift:
        reference = record if reference is None else reference
        if not reference.shape.same_layout(shape):
            raise ShapeMismatchError("Planning and current anatomy use different grids")
        changed = record.target_union().membership ^ reference.target_union().membership
        channels.append(record.prescription * changed.astype(np.float64))

    if cfg.include_bias:
        channels.append(np.ones(shape.dims))

    return FeatureStack(shape, cfg.names, np.stack(channels))

"""
    Surrogate-level recalibration: adapts the decoder so predicted per-ROI
    mean doses match observed summaries, with a ridge pull toward the
    pre-update decoder. The encoder is never touched.
"""

import logging

import numpy as np

from rtwin.calibration.state_space import FractionObservation
from rtwin.errors import ValidationError
from rtwin.grid_core import PatientRecord
from rtwin.settings.config import RIDGE
from rtwin.surrogate import FeatureConfig, FeatureStack, ParamVector, TrainConfig, featurize

logger = logging.getLogger(__name__)


def _summary_rows(
    patient: PatientRecord, stack: FeatureStack, observations: list[FractionObservation]
) -> tuple[list[np.ndarray], np.ndarray]:
    """Per usable (observation, ROI) pair: the ROI feature block (F, n_roi) and the observed mean."""
    flat = stack.values.reshape(len(stack), -1, order="F")
    blocks, targets = [], []
    for obs in observations:
        for roi, value in zip(obs.rois, obs.values, strict=True):
            mask = patient.rois.get(roi)
            if mask is None or mask.is_empty():
                logger.debug(f"Fraction {obs.fraction}: ROI {roi} not on {patient.id}, skipped")
                continue
            blocks.append(flat[:, mask.indices()])
            targets.append(value)
    return blocks, np.asarray(targets, dtype=np.float64)


def summary_objective(
    decoder: np.ndarray, encoder: np.ndarray, anchor: np.ndarray, blocks, targets, ridge: float
) -> float:
    means = np.array([np.maximum((decoder * encoder) @ block, 0.0).mean() for block in blocks])
    return float(np.sum((means - targets) ** 2) + ridge * np.sum((decoder - anchor) ** 2))


def _linearize(decoder, encoder, blocks, targets):
    rows, residuals = [], []
    for block, target in zip(blocks, targets, strict=True):
        activation = (decoder * encoder) @ block
        gate = activation > 0
        rows.append(encoder * block[:, gate].sum(axis=1) / block.shape[1])
        residuals.append(np.maximum(activation, 0.0).mean() - target)
    return np.vstack(rows), np.asarray(residuals)


def proxy_recalibrate(
    params: ParamVector,
    patient: PatientRecord,
    obs: list[FractionObservation],
    cfg: TrainConfig,
    ridge: float = RIDGE,
    feature_cfg: FeatureConfig | None = None,
    reference: PatientRecord | None = None,
    features: FeatureStack | None = None,
) -> ParamVector:
    """
    fn: proxy_recalibrate
    Description: Damped Gauss-Newton on summary misfit + ridge * |w - w_prev|^2
    Args:
        params (ParamVector): current parameters, their decoder is the ridge anchor
        patient (PatientRecord): anatomy the observations refer to
        obs (list): recent FractionObservations (per-ROI mean doses)
        cfg (TrainConfig): iteration budget and tolerance
        ridge (float): stability weight
        feature_cfg (FeatureConfig, optional): channels; defaults to the ones params are named after
        reference (PatientRecord, optional): planning anatomy for the drift channel
        features (FeatureStack, optional): precomputed features of patient
    return:
        ParamVector: new decoder, encoder bitwise unchanged
    """
    if not obs:
        raise ValidationError("Recalibration needs at least one observation")
    if ridge < 0:
        raise ValidationError("Ridge weight must be non-negative")
    if features is None:
        feature_cfg = FeatureConfig.from_names(params.names) if feature_cfg is None else feature_cfg
        features = featurize(patient, feature_cfg, reference)
    blocks, targets = _summary_rows(patient, features, obs)
    if not blocks:
        raise ValidationError(f"No observed ROI matches patient {patient.id}")

    encoder, anchor = params.encoder, params.decoder
    decoder = anchor.copy()
    value = summary_objective(decoder, encoder, anchor, blocks, targets, ridge)
    initial = value
    damping = np.sqrt(ridge) * np.eye(params.n_features)
    for _ in range(cfg.iterations):
        jacobian, residual = _linearize(decoder, encoder, blocks, targets)
        system = np.vstack([jacobian, damping])
        rhs = np.concatenate([-residual, -np.sqrt(ridge) * (decoder - anchor)])
        delta = np.linalg.lstsq(system, rhs, rcond=None)[0]

        step, accepted = 1.0, False
        for _halving in range(30):
            candidate = decoder + step * delta
            candidate_value = summary_objective(candidate, encoder, anchor, blocks, targets, ridge)
            if candidate_value < value:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        decrease = value - candidate_value
        decoder, value = candidate, candidate_value
        if decrease < cfg.tolerance:
            break

    logger.info(
        f"Recalibrated decoder on {len(blocks)} summaries: objective {initial:.4g} -> {value:.4g}"
    )
    return params.with_decoder(decoder)

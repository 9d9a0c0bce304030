"""
    Kernel-feature dose surrogate: dose = relu(sum_f w_f * e_f * x_f) with
    frozen encoder gains e, adaptable decoder weights w and inverted
    dropout on the decoder for stochastic passes.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

from rtwin.errors import DivergenceError, EmptyMaskError, ShapeMismatchError, ValidationError
from rtwin.grid_core import MaskGrid, PatientRecord, ScalarGrid, masked_values
from rtwin.settings.config import (
    BAR_FORMAT,
    DISTANCE_SCALE_MM,
    ITERATIONS,
    LEARNING_RATE,
    MINIBATCH,
    TOLERANCE,
)
from rtwin.surrogate.base import DoseSurrogate
from rtwin.surrogate.features import FeatureConfig, FeatureStack, featurize
from rtwin.surrogate.params import DropoutMask, ParamVector
from rtwin.uq_metrics import DoseEnsemble

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = LEARNING_RATE
    iterations: int = ITERATIONS
    minibatch: int = MINIBATCH
    seed: int = 0
    tolerance: float = TOLERANCE

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"Learning rate must be positive, got {self.learning_rate}")
        if self.iterations < 1:
            raise ValidationError(f"Iteration budget must be >= 1, got {self.iterations}")
        if self.minibatch < 0 or self.tolerance < 0:
            raise ValidationError("Minibatch size and tolerance must be non-negative")


def _check_features(params: ParamVector, features: FeatureStack):
    if len(features) != params.n_features:
        raise ShapeMismatchError(
            f"{len(features)} feature channels but {params.n_features} decoder weights"
        )


def _effective_weights(params: ParamVector, mask: DropoutMask | None) -> np.ndarray:
    weights = params.decoder * params.encoder
    if mask is not None:
        if mask.kept.size != params.n_features:
            raise ShapeMismatchError("Dropout mask length differs from the decoder length")
        weights = weights * mask.kept / (1.0 - params.dropout_rate)
    return weights


def _as_mask(params: ParamVector, mask_or_seed) -> DropoutMask | None:
    if mask_or_seed is None or isinstance(mask_or_seed, DropoutMask):
        return mask_or_seed
    return DropoutMask.draw(int(mask_or_seed), params.dropout_rate, params.n_features)


def preactivation(params: ParamVector, features: FeatureStack, mask_or_seed=None) -> np.ndarray:
    _check_features(params, features)
    weights = _effective_weights(params, _as_mask(params, mask_or_seed))
    return np.tensordot(weights, features.values, axes=1)


def predict(params: ParamVector, features: FeatureStack, mask_or_seed=None) -> ScalarGrid:
    """
    fn: predict
    Description: Deterministic or dropout forward pass
    Args:
        params (ParamVector): surrogate parameters
        features (FeatureStack): feature channels of one patient
        mask_or_seed (DropoutMask | int, optional): dropout pattern or its seed
    return:
        ScalarGrid: predicted dose (Gy), elementwise >= 0
    """
    activation = preactivation(params, features, mask_or_seed)
    return ScalarGrid(features.shape, np.maximum(activation, 0.0))


def predict_ensemble(
    params: ParamVector, features: FeatureStack, seeds, threads: int = 1
) -> DoseEnsemble:
    """K dropout passes, one per distinct seed, collected in seed order."""
    seeds = [int(seed) for seed in seeds]
    if len(set(seeds)) != len(seeds):
        raise ValidationError("Ensemble seeds must be distinct")
    with ThreadPoolExecutor(max(threads, 1)) as executor:
        futures = [executor.submit(predict, params, features, seed) for seed in seeds]
        members = [future.result() for future in futures]
    return DoseEnsemble.from_members(members, seeds)


def masked_l1(pred: ScalarGrid, ref: ScalarGrid, mask: MaskGrid) -> float:
    """Mean absolute error (Gy) over the masked voxels."""
    if mask.is_empty():
        raise EmptyMaskError("Masked L1 over an empty mask")
    if not pred.shape.same_layout(ref.shape):
        raise ShapeMismatchError("Prediction and reference grids differ")
    return float(np.mean(np.abs(masked_values(pred, mask) - masked_values(ref, mask))))


@dataclass(frozen=True)
class _TrainingCase:
    """Feature rows and reference dose restricted to the feasible voxels."""

    features: np.ndarray  # (F, M)
    reference: np.ndarray  # (M,)

    @classmethod
    def build(cls, record: PatientRecord, stack: FeatureStack) -> "_TrainingCase":
        indices = record.feasible.indices()
        flat = stack.values.reshape(len(stack), -1, order="F")[:, indices]
        return cls(flat, masked_values(record.require_reference(), record.feasible))


def _loss_and_grads(params: ParamVector, case: _TrainingCase):
    activation = (params.decoder * params.encoder) @ case.features
    residual = np.maximum(activation, 0.0) - case.reference
    # subgradient of |.| with sign(0) = 0, gated by the relu
    signal = np.sign(residual) * (activation > 0)
    common = case.features @ signal / case.reference.size
    loss = float(np.mean(np.abs(residual)))
    return loss, params.encoder * common, params.decoder * common


def loss_and_gradient(params: ParamVector, record: PatientRecord, stack: FeatureStack):
    """Masked L1 loss of one patient and its analytic decoder gradient."""
    _check_features(params, stack)
    loss, decoder_grad, _ = _loss_and_grads(params, _TrainingCase.build(record, stack))
    return loss, decoder_grad


def train(
    params: ParamVector,
    cohort: list[PatientRecord],
    cfg: TrainConfig,
    freeze_encoder: bool = True,
    feature_cfg: FeatureConfig | None = None,
    progress: bool = False,
) -> tuple[ParamVector, np.ndarray]:
    """
    fn: train
    Description: Fixed-step gradient descent on the cohort-mean masked L1
    Args:
        params (ParamVector): starting parameters
        cohort (list): patients with reference doses
        cfg (TrainConfig): step size, budget, minibatch, seed, tolerance
        freeze_encoder (bool): keep encoder gains fixed
        feature_cfg (FeatureConfig, optional): channels; defaults to the ones params are named after
    return:
        tuple: (trained ParamVector, loss per iteration plus the final loss)
    """
    if not cohort:
        raise ValidationError("Training cohort is empty")
    feature_cfg = FeatureConfig.from_names(params.names) if feature_cfg is None else feature_cfg
    cases = []
    for record in cohort:
        stack = featurize(record, feature_cfg)
        _check_features(params, stack)
        cases.append(_TrainingCase.build(record, stack))

    initial = [(params.decoder * params.encoder) @ case.features for case in cases]
    low = min(float(np.maximum(a, 0).min()) for a in initial)
    high = max(float(np.maximum(a, 0).max()) for a in initial)
    logger.info(f"Initial prediction range [{low:.3f}, {high:.3f}] Gy on {len(cases)} patients")

    rng = np.random.default_rng(cfg.seed)
    encoder, decoder = params.encoder.copy(), params.decoder.copy()
    losses = []
    batch = range(len(cases))
    with tqdm(
        total=cfg.iterations,
        desc="Training surrogate",
        unit="it",
        bar_format=BAR_FORMAT,
        disable=not progress,
    ) as pbar:
        for iteration in range(cfg.iterations):
            if 0 < cfg.minibatch < len(cases):
                batch = np.sort(rng.choice(len(cases), size=cfg.minibatch, replace=False))
            current = ParamVector(encoder, decoder, params.dropout_rate, params.names)
            results = [_loss_and_grads(current, cases[index]) for index in batch]
            loss = float(np.mean([result[0] for result in results]))
            if not np.isfinite(loss):
                raise DivergenceError(f"Training diverged at iteration {iteration} (loss {loss})")
            if iteration == 0:
                logger.info(f"Initial masked L1 loss {loss:.4f} Gy")
            if losses and abs(losses[-1] - loss) < cfg.tolerance:
                losses.append(loss)
                break
            losses.append(loss)
            decoder = decoder - cfg.learning_rate * np.mean([r[1] for r in results], axis=0)
            if not freeze_encoder:
                encoder = encoder - cfg.learning_rate * np.mean([r[2] for r in results], axis=0)
            pbar.update(1)
        else:
            final = ParamVector(encoder, decoder, params.dropout_rate, params.names)
            losses.append(float(np.mean([_loss_and_grads(final, case)[0] for case in cases])))

    trained = ParamVector(
        params.encoder if freeze_encoder else encoder, decoder, params.dropout_rate, params.names
    )
    logger.info(f"Training finished after {len(losses) - 1} updates, final loss {losses[-1]:.6f} Gy")
    return trained, np.asarray(losses)


def grad_check(
    params: ParamVector,
    patient: PatientRecord,
    epsilon: float,
    feature_cfg: FeatureConfig | None = None,
) -> float:
    """Largest coordinate-wise relative gap between the analytic and central-difference decoder gradients."""
    if not epsilon > 0:
        raise ValidationError(f"Finite-difference step must be positive, got {epsilon}")
    feature_cfg = FeatureConfig.from_names(params.names) if feature_cfg is None else feature_cfg
    stack = featurize(patient, feature_cfg)
    _check_features(params, stack)
    case = _TrainingCase.build(patient, stack)
    _, analytic, _ = _loss_and_grads(params, case)

    worst = 0.0
    for index in range(params.n_features):
        step = np.zeros(params.n_features)
        step[index] = epsilon
        forward = _loss_and_grads(params.with_decoder(params.decoder + step), case)[0]
        backward = _loss_and_grads(params.with_decoder(params.decoder - step), case)[0]
        numeric = (forward - backward) / (2.0 * epsilon)
        scale = max(abs(analytic[index]) + abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[index] - numeric) / scale)
    return worst


def write_loss_trajectory(losses, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pd.DataFrame({"iteration": np.arange(len(losses)), "loss": losses}).to_csv(path, index=False)


class KernelSurrogate(DoseSurrogate):
    """
    The kernel-feature surrogate behind the DoseSurrogate interface; holds
    its parameters and feature configuration.
    """

    def __init__(self, params: ParamVector, feature_cfg: FeatureConfig, threads: int = 1) -> None:
        if params.n_features != feature_cfg.n_features:
            raise ShapeMismatchError(
                f"Parameters hold {params.n_features} weights, features need {feature_cfg.n_features}"
            )
        self.params = params
        self.feature_cfg = feature_cfg
        self.threads = threads

    @classmethod
    def from_params(
        cls, params: ParamVector, distance_scale: float = DISTANCE_SCALE_MM, threads: int = 1
    ) -> "KernelSurrogate":
        """Surrogate over the channels params are named after."""
        return cls(params, FeatureConfig.from_names(params.names, distance_scale), threads)

    def with_params(self, params: ParamVector) -> "KernelSurrogate":
        return KernelSurrogate(params, self.feature_cfg, self.threads)

    def featurize(self, record: PatientRecord, reference: PatientRecord | None = None) -> FeatureStack:
        return featurize(record, self.feature_cfg, reference)

    def predict(self, features: FeatureStack, seed: int | None = None) -> ScalarGrid:
        return predict(self.params, features, seed)

    def ensemble(self, features: FeatureStack, seeds) -> DoseEnsemble:
        return predict_ensemble(self.params, features, seeds, self.threads)

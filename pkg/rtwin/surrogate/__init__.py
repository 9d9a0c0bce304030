from rtwin.surrogate.base import DoseSurrogate
from rtwin.surrogate.features import FeatureConfig, FeatureStack, featurize
from rtwin.surrogate.kernel import (
    KernelSurrogate,
    TrainConfig,
    grad_check,
    loss_and_gradient,
    masked_l1,
    predict,
    predict_ensemble,
    preactivation,
    train,
    write_loss_trajectory,
)
from rtwin.surrogate.params import DropoutMask, ParamVector, init_params, load_params, save_params

__all__ = [
    "DoseSurrogate",
    "DropoutMask",
    "FeatureConfig",
    "FeatureStack",
    "KernelSurrogate",
    "ParamVector",
    "TrainConfig",
    "featurize",
    "grad_check",
    "init_params",
    "load_params",
    "loss_and_gradient",
    "masked_l1",
    "preactivation",
    "predict",
    "predict_ensemble",
    "save_params",
    "train",
    "write_loss_trajectory",
]

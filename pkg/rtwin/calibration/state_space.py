"""
    State-space model, belief ensemble and fraction-level observations.

    Transition and observation functions are vectorized over particles:
    transition(x, u, theta) maps (N, state_dim) states and (N, theta_dim)
    parameters to (N, state_dim); observation(x) maps (N, state_dim) to
    (N, obs_dim). u is the previous action vector or None.
"""

import os
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from rtwin.errors import MissingFileError, ValidationError
from rtwin.settings.config import OBSERVATION_NOISE_GY, PROCESS_NOISE, RIDGE


def _covariance(matrix, dim: int, label: str) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if matrix.shape != (dim, dim):
        raise ValidationError(f"{label} must be {dim}x{dim}, got {matrix.shape}")
    if not np.allclose(matrix, matrix.T):
        raise ValidationError(f"{label} must be symmetric")
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"{label} must be positive definite") from exc
    return matrix


@dataclass(frozen=True)
class StateSpaceSpec:
    state_dim: int
    obs_dim: int
    transition: Callable
    observation: Callable
    process_cov: np.ndarray
    observation_cov: np.ndarray
    theta_dim: int = 0
    ridge: float = RIDGE
    theta_prior: np.ndarray | None = None

    def __post_init__(self):
        if self.state_dim < 1 or self.obs_dim < 1 or self.theta_dim < 0:
            raise ValidationError("State and observation dimensions must be positive")
        if self.ridge < 0:
            raise ValidationError("Ridge weight must be non-negative")
        object.__setattr__(self, "process_cov", _covariance(self.process_cov, self.state_dim, "Process covariance"))
        object.__setattr__(
            self, "observation_cov", _covariance(self.observation_cov, self.obs_dim, "Observation covariance")
        )
        prior = np.zeros(self.theta_dim) if self.theta_prior is None else np.asarray(self.theta_prior, float)
        if prior.shape != (self.theta_dim,):
            raise ValidationError("Parameter prior has the wrong length")
        object.__setattr__(self, "theta_prior", prior)


@dataclass(frozen=True)
class BeliefState:
    """Weighted particle ensemble over (x, theta) at fraction t."""

    x: np.ndarray
    theta: np.ndarray
    weights: np.ndarray
    t: int = 0
    ess: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        n = x.shape[0]
        theta = np.asarray(self.theta, dtype=np.float64)
        theta = theta.reshape(n, -1) if theta.size else np.empty((n, 0))
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if n < 1 or weights.shape != (n,):
            raise ValidationError("Belief needs N >= 1 particles and one weight each")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(theta)) and np.all(np.isfinite(weights))):
            raise ValidationError("Belief entries must be finite")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValidationError("Belief weights must be non-negative and sum to 1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "weights", weights)
        if np.isnan(self.ess):
            object.__setattr__(self, "ess", effective_sample_size(weights))

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class FractionObservation:
    fraction: int
    values: np.ndarray
    rois: tuple[str, ...] = ()
    action: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(values)):
            raise ValidationError("Observation entries must be finite")
        rois = tuple(self.rois)
        if rois and len(rois) != values.size:
            raise ValidationError("One ROI name per observed summary is required")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "rois", rois)
        if self.action is not None:
            object.__setattr__(self, "action", np.asarray(self.action, dtype=np.float64).ravel())

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.rois, self.values.tolist(), strict=True))


def effective_sample_size(weights: np.ndarray) -> float:
    return float(1.0 / np.sum(np.square(weights)))


def init_belief(
    n: int,
    x_mean,
    x_cov,
    theta_mean=(),
    theta_cov=None,
    seed: int = 0,
) -> BeliefState:
    """N equally weighted particles drawn from Gaussian priors on x and theta."""
    if n < 1:
        raise ValidationError("A belief needs at least one particle")
    rng = np.random.default_rng(seed)
    x_mean = np.atleast_1d(np.asarray(x_mean, dtype=np.float64))
    x = x_mean + rng.standard_normal((n, x_mean.size)) @ np.linalg.cholesky(
        _covariance(x_cov, x_mean.size, "State prior covariance")
    ).T
    theta_mean = np.atleast_1d(np.asarray(theta_mean, dtype=np.float64))
    if theta_mean.size and theta_cov is not None:
        chol = np.linalg.cholesky(_covariance(theta_cov, theta_mean.size, "Parameter prior covariance"))
        theta = theta_mean + rng.standard_normal((n, theta_mean.size)) @ chol.T
    else:
        theta = np.tile(theta_mean, (n, 1))
    return BeliefState(x, theta, np.full(n, 1.0 / n))


def belief_mean(belief: BeliefState) -> tuple[np.ndarray, np.ndarray]:
    return belief.weights @ belief.x, belief.weights @ belief.theta


def belief_covariance(belief: BeliefState) -> np.ndarray:
    centered = belief.x - belief.weights @ belief.x
    return (centered * belief.weights[:, None]).T @ centered


def dose_scaling_spec(
    nominal_means,
    process_noise: float = PROCESS_NOISE,
    observation_noise: float = OBSERVATION_NOISE_GY,
    ridge: float = RIDGE,
    theta_prior=(0.3,),
) -> StateSpaceSpec:
    """
    Default engine model: the state is one multiplicative dose-scaling
    factor per ROI (random walk), theta a static radiosensitivity, and the
    observation the scaled nominal per-ROI mean dose.
    """
    nominal = np.asarray(nominal_means, dtype=np.float64).ravel()
    dim = nominal.size
    return StateSpaceSpec(
        state_dim=dim,
        obs_dim=dim,
        transition=lambda x, u, theta: x,
        observation=lambda x: x * nominal,
        process_cov=np.eye(dim) * process_noise**2,
        observation_cov=np.eye(dim) * observation_noise**2,
        theta_dim=len(theta_prior),
        ridge=ridge,
        theta_prior=np.asarray(theta_prior, dtype=np.float64),
    )


# ---- CSV audit trail ----


def belief_frame(belief: BeliefState) -> pd.DataFrame:
    frame = pd.DataFrame(belief.x, columns=[f"x{i}" for i in range(belief.x.shape[1])])
    for i in range(belief.theta.shape[1]):
        frame[f"theta{i}"] = belief.theta[:, i]
    frame.insert(0, "weight", belief.weights)
    frame.insert(0, "particle", np.arange(belief.n))
    frame.insert(0, "t", belief.t)
    return frame


def write_observations(observations: list[FractionObservation], path: str):
    rows = [
        (obs.fraction, roi, value)
        for obs in observations
        for roi, value in zip(obs.rois, obs.values, strict=True)
    ]
    pd.DataFrame(rows, columns=["fraction", "roi", "mean_dose"]).to_csv(path, index=False)


def read_observations(path: str) -> list[FractionObservation]:
    """Reads a fraction,roi,mean_dose stream into one observation per fraction."""
    if not os.path.exists(path):
        raise MissingFileError(f"Observation file {path} does not exist")
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns[:3]) != ["fraction", "roi", "mean_dose"]:
        raise ValidationError(f"{path}: expected columns fraction,roi,mean_dose")
    return [
        FractionObservation(int(fraction), rows.mean_dose.to_numpy(), tuple(rows.roi.astype(str)))
        for fraction, rows in frame.groupby("fraction", sort=True)
    ]

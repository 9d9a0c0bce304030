"""
    Bootstrap particle filter over the joint (x, theta) belief.
"""

import logging

import numpy as np

from rtwin.calibration.state_space import (
    BeliefState,
    FractionObservation,
    StateSpaceSpec,
    effective_sample_size,
)
from rtwin.errors import LikelihoodUnderflowError, ShapeMismatchError

logger = logging.getLogger(__name__)

# exp() of anything below this is 0 in double precision
_LOG_UNDERFLOW = np.log(np.finfo(np.float64).tiny) - 52 * np.log(2.0)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices of the particles kept by one systematic resampling sweep."""
    n = weights.size
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    positions = rng.uniform(0.0, 1.0 / n) + np.arange(n) / n
    return np.minimum(np.searchsorted(cumulative, positions), n - 1)


def _log_likelihood(spec: StateSpaceSpec, predicted: np.ndarray, y: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(spec.observation_cov)
    whitened = np.linalg.solve(chol, (y - predicted).T)
    return -0.5 * np.sum(whitened**2, axis=0)


def filter_update(
    belief: BeliefState,
    obs: FractionObservation,
    spec: StateSpaceSpec,
    seed: int,
) -> BeliefState:
    """
    fn: filter_update
    Description: Propagate, reweight by the Gaussian likelihood, resample when ESS < N/2
    Args:
        belief (BeliefState): posterior at t-1
        obs (FractionObservation): y_t with the action applied at t-1
        spec (StateSpaceSpec): transition, observation and noise model
        seed (int): seed for process noise and resampling
    return:
        BeliefState: posterior at t, ess holds the pre-resampling value
    """
    if belief.x.shape[1] != spec.state_dim or belief.theta.shape[1] != spec.theta_dim:
        raise ShapeMismatchError("Belief dimensions differ from the state-space model")
    if obs.values.size != spec.obs_dim:
        raise ShapeMismatchError(f"Expected {spec.obs_dim} observed values, got {obs.values.size}")

    rng = np.random.default_rng(seed)
    n = belief.n
    noise = rng.standard_normal((n, spec.state_dim)) @ np.linalg.cholesky(spec.process_cov).T
    x = np.asarray(spec.transition(belief.x, obs.action, belief.theta), dtype=np.float64) + noise
    predicted = np.asarray(spec.observation(x), dtype=np.float64).reshape(n, spec.obs_dim)

    log_likelihood = _log_likelihood(spec, predicted, obs.values)
    if not np.any(np.isfinite(log_likelihood)) or np.nanmax(log_likelihood) < _LOG_UNDERFLOW:
        raise LikelihoodUnderflowError(
            f"Fraction {obs.fraction}: every particle likelihood underflows "
            f"(max log-likelihood {np.nanmax(log_likelihood):.1f})"
        )
    with np.errstate(divide="ignore"):
        log_weights = np.log(belief.weights) + log_likelihood
    log_weights = np.where(np.isfinite(log_weights), log_weights, -np.inf)
    weights = np.exp(log_weights - log_weights.max())
    weights /= weights.sum()

    ess = effective_sample_size(weights)
    theta = belief.theta
    if ess < n / 2:
        logger.debug(f"Fraction {obs.fraction}: ESS {ess:.1f} < {n / 2}, resampling")
        index = systematic_resample(weights, rng)
        x, theta = x[index], theta[index]
        weights = np.full(n, 1.0 / n)
    return BeliefState(x, theta, weights, t=obs.fraction, ess=ess)

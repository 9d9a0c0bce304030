"""
    Fraction-level MAP estimate of (x_t, theta): Gauss-Newton on the
    whitened residuals with a finite-difference Jacobian and Armijo
    backtracking.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from rtwin.calibration.state_space import FractionObservation, StateSpaceSpec
from rtwin.errors import ShapeMismatchError, ValidationError
from rtwin.settings.config import MAP_GRAD_TOLERANCE, MAP_ITERATIONS, MAP_TOLERANCE

logger = logging.getLogger(__name__)

_ARMIJO = 1e-4
_MIN_STEP = 1e-16


@dataclass(frozen=True)
class MapResult:
    x: np.ndarray
    theta: np.ndarray
    objective: float
    converged: bool
    iterations: int


def map_residuals(z: np.ndarray, x_prev, u_prev, obs: FractionObservation, spec: StateSpaceSpec) -> np.ndarray:
    """Whitened observation, process and ridge residuals; their squared norm is the MAP objective."""
    x, theta = z[: spec.state_dim], z[spec.state_dim :]
    obs_resid = obs.values - np.asarray(spec.observation(x[None, :]), dtype=np.float64).ravel()
    proc_resid = x - np.asarray(spec.transition(x_prev[None, :], u_prev, theta[None, :]), dtype=np.float64).ravel()
    return np.concatenate(
        [
            solve_triangular(np.linalg.cholesky(spec.observation_cov), obs_resid, lower=True),
            solve_triangular(np.linalg.cholesky(spec.process_cov), proc_resid, lower=True),
            np.sqrt(spec.ridge) * (theta - spec.theta_prior),
        ]
    )


def map_objective(z: np.ndarray, x_prev, u_prev, obs: FractionObservation, spec: StateSpaceSpec) -> float:
    """Observation misfit + process misfit + ridge penalty on theta, z = [x, theta]."""
    residuals = map_residuals(z, x_prev, u_prev, obs, spec)
    return float(residuals @ residuals)


def _jacobian(residuals, z: np.ndarray) -> np.ndarray:
    columns = []
    for i in range(z.size):
        step = 1e-5 * max(1.0, abs(z[i]))
        forward, backward = z.copy(), z.copy()
        forward[i] += step
        backward[i] -= step
        columns.append((residuals(forward) - residuals(backward)) / (2.0 * step))
    return np.column_stack(columns)


def map_update(
    x_prev,
    u_prev,
    obs: FractionObservation,
    spec: StateSpaceSpec,
    init=None,
    tolerance: float = MAP_TOLERANCE,
    max_iter: int = MAP_ITERATIONS,
    grad_tolerance: float = MAP_GRAD_TOLERANCE,
) -> MapResult:
    """
    fn: map_update
    Description: Minimizes the fraction objective from init (defaults to [x_prev, theta_prior])
    Args:
        x_prev: previous state estimate
        u_prev: action applied at t-1 (or None)
        obs (FractionObservation): y_t
        spec (StateSpaceSpec): model and noise covariances
        init: starting [x, theta]
        tolerance (float): stop once an accepted step lowers the objective by less than this
        max_iter (int): Gauss-Newton iteration budget
        grad_tolerance (float): stop once the gradient norm is this small
    return:
        MapResult: the objective at the result never exceeds the one at init
    """
    x_prev = np.atleast_1d(np.asarray(x_prev, dtype=np.float64))
    if x_prev.size != spec.state_dim or obs.values.size != spec.obs_dim:
        raise ShapeMismatchError("MAP inputs do not match the state-space dimensions")
    if max_iter < 1:
        raise ValidationError("MAP iteration budget must be >= 1")
    z = np.concatenate([x_prev, spec.theta_prior]) if init is None else np.asarray(init, dtype=np.float64).copy()
    if z.size != spec.state_dim + spec.theta_dim:
        raise ShapeMismatchError("MAP initial point has the wrong length")

    def residuals(point):
        return map_residuals(point, x_prev, u_prev, obs, spec)

    r = residuals(z)
    value = float(r @ r)
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        if value == 0.0:
            converged = True
            break
        jac = _jacobian(residuals, z)
        grad = 2.0 * jac.T @ r
        if np.linalg.norm(grad) <= grad_tolerance:
            converged = True
            break
        direction = np.linalg.lstsq(jac, -r, rcond=None)[0]
        slope = float(grad @ direction)
        step = 1.0
        while True:
            candidate = z + step * direction
            candidate_r = residuals(candidate)
            candidate_value = float(candidate_r @ candidate_r)
            if candidate_value <= value + _ARMIJO * step * slope:
                break
            step *= 0.5
            if step <= _MIN_STEP:
                break
        if step <= _MIN_STEP:
            # no descent left at machine precision
            converged = True
            break
        decrease = value - candidate_value
        z, r, value = candidate, candidate_r, candidate_value
        if decrease < tolerance and np.linalg.norm(grad) <= np.sqrt(grad_tolerance):
            converged = True
            break

    if not converged:
        logger.warning(f"Fraction {obs.fraction}: MAP budget of {max_iter} iterations exhausted")
    return MapResult(z[: spec.state_dim], z[spec.state_dim :], value, converged, iteration)

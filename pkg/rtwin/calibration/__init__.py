from rtwin.calibration.filtering import filter_update, systematic_resample
from rtwin.calibration.map import MapResult, map_objective, map_residuals, map_update
from rtwin.calibration.proxy import proxy_recalibrate, summary_objective
from rtwin.calibration.state_space import (
    BeliefState,
    FractionObservation,
    StateSpaceSpec,
    belief_covariance,
    belief_frame,
    belief_mean,
    dose_scaling_spec,
    effective_sample_size,
    init_belief,
    read_observations,
    write_observations,
)

__all__ = [
    "BeliefState",
    "FractionObservation",
    "MapResult",
    "StateSpaceSpec",
    "belief_covariance",
    "belief_frame",
    "belief_mean",
    "dose_scaling_spec",
    "effective_sample_size",
    "filter_update",
    "init_belief",
    "map_objective",
    "map_residuals",
    "map_update",
    "proxy_recalibrate",
    "read_observations",
    "summary_objective",
    "systematic_resample",
    "write_observations",
]

from .field import (
    CHUNK_THRESHOLD,
    DEFAULT_TEMPS,
    EPS_AGG,
    EPS_NORM,
    DegenerateWeightsError,
    DriftFieldResult,
    affinity_query_to_target,
    affinity_target_to_query,
    aggregate_drift,
    drift_field,
    drift_loss,
    drift_tau,
    flatten_locations,
    joint_weights,
    layer_drift_loss,
    log_joint_weights,
    normalize_rows,
    pairwise_sqdist,
)
from .oracle import drift_oracle

__all__ = [
    "CHUNK_THRESHOLD",
    "DEFAULT_TEMPS",
    "EPS_AGG",
    "EPS_NORM",
    "DegenerateWeightsError",
    "DriftFieldResult",
    "affinity_query_to_target",
    "affinity_target_to_query",
    "aggregate_drift",
    "drift_field",
    "drift_loss",
    "drift_oracle",
    "drift_tau",
    "flatten_locations",
    "joint_weights",
    "layer_drift_loss",
    "log_joint_weights",
    "normalize_rows",
    "pairwise_sqdist",
]

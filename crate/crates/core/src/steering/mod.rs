//! Interventions on step-boundary states.
//!
//! Additive steering along a termination direction shortens or prolongs
//! runs. Gated policies apply an intervention only where a predictor or a
//! trajectory-divergence rule flags a likely failure, and account for every
//! correction and reversion. The ideal trajectory of correct runs drives a
//! low-rank corrective update.

mod additive;
mod direction;
mod ideal;
mod policy;
mod sidecar;

pub use additive::{
    apply_additive, length_sweep, AdditivePolicy, ApplyAt, LayerSet, LengthRow, LengthSweepSpec,
    SteeringConfig, DEFAULT_ALPHA_CAP,
};
pub use direction::{build_direction, cosine, Aggregation, SteeringDirection};
pub use ideal::{
    calibrate_thresholds, choose_threshold, fit_ideal_trajectory, quantile_grid,
    trajectory_steer_step, CalibrationConfig, DeviationState, IdealConfig, IdealTrajectory,
    ThresholdChoice, Thresholds, TrajectoryPolicy,
};
pub use policy::{
    read_outcome_csv, run_gated_policy_harness, run_gated_policy_traces, EpisodePair, EpisodeRange,
    Gate, HarnessIntervention, HarnessPolicyReport, OutcomePair, OutcomeRecord, PolicyMode,
    PolicyOutcome,
};
pub use sidecar::{
    decode_direction, decode_ideal, encode_direction, encode_ideal, read_direction, read_ideal,
    write_direction, write_ideal, DIRECTION_MAGIC, IDEAL_MAGIC, SIDECAR_VERSION,
};

//! Hybrid spline/IMU state, prediction and iterated EKF update.

pub mod complexity;
mod estimator;
mod iekf;
mod state;

pub use estimator::{
    plan_passes, Estimator, EstimatorConfig, FitErrorMode, Mode, PassReport, ReEstimationConfig, ScanReport,
};
pub use iekf::{iekf_update, IekfConfig, IekfOutcome, ObsRow, Observation};
pub use state::{
    jump_state, layout, symmetrize, transition_matrix, Filter, HybridState, InitialUncertainty, ProcessNoise,
    StateCov, StateVec, STATE_DIM,
};

//! Continuous-time LiDAR-inertial odometry on an increment-parameterized
//! cumulative cubic B-spline, estimated with an iterated EKF against a
//! probabilistic adaptive voxel map.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod imu_observation;
pub mod lidar_observation;
pub mod lie_math;
pub mod pipeline;
pub mod simulator;
pub mod spline;
pub mod state_filter;
pub mod voxel_map;

pub use error::{Error, Result};

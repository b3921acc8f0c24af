//! Neurobiologically inspired stereo visual SLAM.
//!
//! The system couples four stages: a direct sparse stereo visual odometry
//! ([`dso_vo`]) that estimates planar velocities from image pairs, a Bayesian
//! attractor network ([`attractor`]) of head-direction and grid cells that
//! integrates those velocities into ring/torus phases, a view-template store
//! ([`local_view`]) that recognizes revisited scenes and injects calibration
//! cues, and a semi-metric experience map ([`experience_map`]) optimized by
//! robust nonlinear least squares. [`pipeline`] wires the stages, loads
//! datasets, synthesizes test worlds, and evaluates trajectories.

pub mod attractor;
pub mod dso_vo;
pub mod experience_map;
pub mod geometry;
pub mod local_view;
pub mod pipeline;

pub use geometry::{CameraIntrinsics, PlanarVelocity, RigidTransform3};

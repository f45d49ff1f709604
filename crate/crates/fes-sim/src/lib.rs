//! Deterministic closed-loop FES gait simulation toolkit.
//!
//! The crate simulates a treadmill walker with induced foot drop, drives
//! dorsiflexor stimulation either open loop (fixed trapezoid) or closed
//! loop (real-time toe-clearance feedback), and reproduces the full
//! kinematic/statistical analysis: cycle-normalized clearance curves,
//! pointwise permutation tests, minimum toe clearance, within-cycle
//! variability, stimulation profiles and cumulative electrical charge.
//!
//! Modules:
//! - [`geometry`]: sole point clouds, rigid registration, point-to-plane
//!   toe clearance.
//! - [`mocap`]: marker-frame streams and their CSV format.
//! - [`gait_state`]: stance/swing detection, mid-stance onset, cycle
//!   segmentation.
//! - [`controllers`]: trapezoidal open-loop profiles, the closed-loop
//!   clearance controller, calibration via the identification protocol.
//! - [`plant`]: the synthetic walker with recruitment/activation dynamics
//!   and ground-truth publication.
//! - [`analysis`]: cycle statistics, permutation tests, charge accounting.
//! - [`pipeline`]: calibrate / run / analyze orchestration for full
//!   scenario grids.

pub mod analysis;
pub mod controllers;
pub mod gait_state;
pub mod geometry;
pub mod mocap;
pub mod pipeline;
pub mod plant;
pub mod seeds;

pub use geometry::FootSide;
pub use plant::{Condition, CONTROL_DT_S};

//! Cooperative LiDAR perception closed-loop with adaptive signal control.
//!
//! The crate simulates a signalized T-intersection observed by an
//! infrastructure LiDAR and by LiDARs carried on connected automated
//! vehicles (CAVs). Per frame, the pipeline is:
//!
//! 1. [`lidar`] casts synthetic frames for every sensor against the
//!    current scene,
//! 2. [`geometry`] merges the raw clouds into the ego sensor's frame,
//! 3. [`detection`] extracts vehicle boxes (RANSAC ground removal,
//!    DBSCAN clustering, size filtering),
//! 4. [`fusion`] moves detections to the global frame, removes
//!    duplicates, geofences them to the road and maps them to lanes,
//! 5. [`control`] runs max-pressure signal control on the fused
//!    observations, and the signal feeds back into [`traffic`].
//!
//! [`metrics`] scores detection quality (AP40), data-collection
//! efficiency (E-CVPR) and control performance (average delay);
//! [`harness`] orchestrates full runs and parameter sweeps. Everything
//! is deterministic given a scenario configuration and a seed.

pub mod control;
pub mod detection;
pub mod error;
pub mod formats;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod lidar;
pub mod metrics;
pub mod scenario;
pub mod traffic;

pub use error::{Error, Result};

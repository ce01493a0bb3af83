//! Visual localization toolkit: offline 3D map construction from an ordered
//! frame survey, model compression and alignment, and an online 6-DOF pose
//! estimation pipeline combining descriptor matching, optical-flow tracking,
//! RANSAC PnP and a Kalman filter.

pub mod descriptors;
pub mod geometry;
pub mod localization;
pub mod mapping;
pub mod tracking;

pub use descriptors::{AnnIndex, AnnParams, Descriptor, MatchPair};
pub use geometry::{CameraIntrinsics, Keypoint, Pose, SimilarityTransform};
pub use localization::{Correspondence, KalmanConfig, LocalizeOptions, RansacConfig};
pub use mapping::{MapPoint, Model3D, SurveyFrame};

/// Caps the global worker pool from the `VLOC_THREADS` environment variable
/// (default 8). Safe to call more than once; later calls are no-ops.
pub fn init_thread_pool() {
    let threads = std::env::var("VLOC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(8);
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

//! Online pose estimation back-end: 2D-3D correspondence generation with
//! projection-error gating, P3P+RANSAC pose estimation with nonlinear
//! refinement, and an 18-state Kalman filter with residual gating.

mod kalman;
mod p3p;
mod ransac;
mod stream;

pub use kalman::{
    kalman_predict, kalman_update, KalmanConfig, KalmanFilter, KalmanState, PoseMeasurement,
    wrap_angle, ANGLE_OFFSET, STATE_DIM,
};
pub use p3p::p3p_solve;
pub use ransac::{ransac_pnp, refine_pose, RansacEstimate};
pub use stream::{
    localize_stream, FrameEstimate, LocalizeOptions, OnlineSource, PoseStream, ScheduleMode,
    TimingReport, POSE_CSV_HEADER,
};

use nalgebra::{Point3, Vector2};
use thiserror::Error;

use crate::descriptors::Descriptor;
use crate::geometry::Pose;
use crate::mapping::Model3D;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LocalizeError {
    #[error("need at least 4 correspondences, got {got}")]
    InsufficientCorrespondences { got: usize },
    #[error("best consensus has {best} inliers, below the minimum {min}")]
    InsufficientInliers { best: usize, min: usize },
}

/// A 2D keypoint paired with a 3D map point.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    /// Pixel coordinates of the observation.
    pub keypoint_uv: Vector2<f64>,
    /// Stable id of the map point.
    pub point_id: u32,
    /// Map-frame position of the point.
    pub position: Point3<f64>,
    /// Squared L2 descriptor distance of the match.
    pub descriptor_distance: f32,
    /// Pixel distance between the observation and the point projected
    /// through the predicted pose; absent when no prediction exists.
    pub projection_error: Option<f64>,
}

/// Parameters of correspondence selection and RANSAC pose estimation.
#[derive(Debug, Clone, Copy)]
pub struct RansacConfig {
    /// Reprojection inlier threshold, pixels.
    pub inlier_threshold: f64,
    /// Probability that at least one sampled hypothesis is outlier-free.
    pub confidence: f64,
    /// Hard iteration cap.
    pub max_iterations: usize,
    /// Minimum consensus size for a pose to be reported.
    pub min_inliers: usize,
    /// Correspondences kept for pose estimation after quality ordering.
    pub top_k: usize,
    /// Projection-error gate against the predicted pose, pixels.
    pub projection_gate: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 8.0,
            confidence: 0.99,
            max_iterations: 500,
            min_inliers: 12,
            top_k: 100,
            projection_gate: 10.0,
        }
    }
}

/// Default squared-distance ratio threshold for online matching.
pub const DEFAULT_RATIO_THRESHOLD: f32 = 0.7;

/// Builds model correspondences for one frame's keypoints and descriptors.
///
/// Each descriptor is matched against the model index (ratio test against
/// the nearest neighbor belonging to a *different* map point, so that
/// multi-descriptor points do not defeat the test). With a predicted pose,
/// candidates whose projection error exceeds the gate are discarded. The
/// survivors are sorted ascending by descriptor distance and truncated to
/// `top_k`. Fewer than 4 survivors means the caller skips pose estimation
/// for this frame.
pub fn make_correspondences(
    keypoint_uvs: &[Vector2<f64>],
    descriptors: &[Descriptor],
    model: &Model3D,
    predicted_pose: Option<&Pose>,
    config: &RansacConfig,
    ratio_threshold: f32,
) -> Vec<Correspondence> {
    debug_assert_eq!(keypoint_uvs.len(), descriptors.len());
    let checks = model.index.params().checks as usize;
    // retrieve a few extra neighbors so a second distinct point is available
    let k = 6usize;

    let mut out = Vec::new();
    for (uv, descriptor) in keypoint_uvs.iter().zip(descriptors) {
        let neighbors = model.index.knn(model.descriptor_table(), descriptor, k, checks);
        let Some(best) = neighbors.first() else {
            continue;
        };
        let best_point = model.descriptor_to_point[best.target_index];
        let second = neighbors
            .iter()
            .skip(1)
            .find(|n| model.descriptor_to_point[n.target_index] != best_point);
        let ratio = match second {
            Some(n) if n.distance > 0.0 => best.distance / n.distance,
            Some(_) => 1.0,
            // no second distinct point among the neighbors: test disabled
            None => 0.0,
        };
        if ratio >= ratio_threshold {
            continue;
        }
        let point = &model.points[model.point_index(best_point)];
        let projection_error = predicted_pose.map(|pose| {
            match crate::geometry::project(pose, &model.intrinsics, &point.position) {
                Some(proj) => (proj - uv).norm(),
                None => f64::INFINITY,
            }
        });
        if let Some(err) = projection_error {
            if err > config.projection_gate {
                continue;
            }
        }
        out.push(Correspondence {
            keypoint_uv: *uv,
            point_id: best_point,
            position: point.position,
            descriptor_distance: best.distance,
            projection_error,
        });
    }
    out.sort_by(|a, b| a.descriptor_distance.total_cmp(&b.descriptor_distance));
    out.truncate(config.top_k);
    out
}

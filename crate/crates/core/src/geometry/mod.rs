//! Camera model, pose algebra, projection, triangulation and similarity
//! alignment. Everything here is a pure function over immutable values.

mod align;
mod camera;
mod pose;
mod triangulate;

pub use align::{umeyama_align, AlignmentReport};
pub use camera::CameraIntrinsics;
pub use pose::{Pose, SimilarityTransform};
pub use triangulate::{triangulate, Triangulation, DEFAULT_MIN_PARALLAX_RAD};

use nalgebra::{Point3, Vector2};
use thiserror::Error;

/// Numerical failure modes of the geometric operations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    /// Two-view geometry too weak to triangulate: rays nearly parallel or a
    /// negative depth in one of the cameras.
    #[error("degenerate geometry: parallax {parallax_deg:.4} deg, min depth {min_depth:.4} m")]
    DegenerateGeometry { parallax_deg: f64, min_depth: f64 },
    /// Control points for alignment do not span a plane.
    #[error("control points are collinear")]
    CollinearPoints,
    /// Fewer point pairs than the operation needs.
    #[error("need at least {needed} points, got {got}")]
    NotEnoughPoints { needed: usize, got: usize },
}

/// A detected image feature position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Sub-pixel column coordinate.
    pub u: f64,
    /// Sub-pixel row coordinate.
    pub v: f64,
    /// Sequence index of the owning frame.
    pub frame_id: u32,
    /// Detection strength, unitless.
    pub response: f64,
}

impl Keypoint {
    pub fn new(u: f64, v: f64, frame_id: u32, response: f64) -> Self {
        Self {
            u,
            v,
            frame_id,
            response,
        }
    }

    pub fn uv(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

/// Projects a model-frame point through `pose` and the pinhole `intrinsics`.
///
/// Returns `None` when the camera-frame depth is at or below 1e-9, i.e. the
/// point sits behind (or numerically on) the image plane. Callers exclude
/// such points from projection-error computations.
pub fn project(
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    p: &Point3<f64>,
) -> Option<Vector2<f64>> {
    let cam = pose.transform_point(p);
    if cam.z <= 1e-9 {
        return None;
    }
    Some(intrinsics.project_camera_point(&cam))
}

/// Inverse of [`project`] at a known depth: lifts pixel `(u, v)` to the
/// camera-frame ray scaled to `depth`, then maps it back to the model frame.
pub fn unproject(
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    uv: &Vector2<f64>,
    depth: f64,
) -> Point3<f64> {
    let ray = intrinsics.unproject_pixel(uv);
    pose.inverse_transform_point(&Point3::from(ray * depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{UnitQuaternion, Vector3};

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let uv = project(
            &Pose::identity(),
            &test_intrinsics(),
            &Point3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        assert_relative_eq!(uv.x, 320.0, epsilon = 1e-12);
        assert_relative_eq!(uv.y, 240.0, epsilon = 1e-12);
    }

    #[test]
    fn off_axis_projection() {
        let uv = project(
            &Pose::identity(),
            &test_intrinsics(),
            &Point3::new(1.0, 0.0, 2.0),
        )
        .unwrap();
        assert_relative_eq!(uv.x, 570.0, epsilon = 1e-12);
        assert_relative_eq!(uv.y, 240.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let pose = Pose::new(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, -1.0));
        assert!(project(&pose, &test_intrinsics(), &Point3::new(0.0, 0.0, 0.5)).is_none());
    }

    #[test]
    fn project_unproject_round_trip() {
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3),
            Vector3::new(0.5, -1.0, 2.0),
        );
        let k = test_intrinsics();
        let p = Point3::new(0.3, -0.2, 4.0);
        let cam = pose.transform_point(&p);
        let uv = project(&pose, &k, &p).unwrap();
        let back = unproject(&pose, &k, &uv, cam.z);
        assert_relative_eq!(back, p, epsilon = 1e-9);
    }
}

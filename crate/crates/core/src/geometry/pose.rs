use nalgebra::{Point3, UnitQuaternion, Vector3};

fn renorm(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Rigid transform mapping model-frame points into the camera frame:
/// `p_cam = R * p_model + t`.
///
/// The camera center in model coordinates is `-R^T * t`. Euler accessors use
/// the intrinsic yaw-pitch-roll convention, `R = Rz(yaw) * Ry(pitch) * Rx(roll)`,
/// which is singular at |pitch| = pi/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renorm(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose from Euler angles (roll, pitch, yaw) and translation `t`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_euler_angles(roll, pitch, yaw), translation)
    }

    /// Pose of a camera whose center sits at `center` in the model frame with
    /// world-to-camera rotation `rotation`.
    pub fn from_center_rotation(center: Point3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        let r = renorm(rotation);
        Self {
            rotation: r,
            translation: -(r * center.coords),
        }
    }

    /// (roll, pitch, yaw) of the world-to-camera rotation, in radians.
    pub fn euler_angles(&self) -> (f64, f64, f64) {
        self.rotation.euler_angles()
    }

    /// Camera center in model coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.inverse() * self.translation))
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse_transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.inverse() * (p.coords - self.translation))
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        Self {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    /// Composition: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: renorm(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Rotation angle (radians) and translation distance between two poses.
    pub fn delta(&self, other: &Self) -> (f64, f64) {
        let dr = self.rotation.angle_to(&other.rotation);
        let dt = (self.translation - other.translation).norm();
        (dr, dt)
    }
}

/// Scaled rigid transform `p -> scale * R * p + t` mapping an arbitrary-gauge
/// reconstruction into metric world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(scale > 0.0);
        Self {
            scale,
            rotation: renorm(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        let inv_scale = 1.0 / self.scale;
        Self {
            scale: inv_scale,
            rotation: inv_rot,
            translation: -(inv_rot * self.translation) * inv_scale,
        }
    }

    /// Rewrites a world-to-camera pose so that it projects similarity-mapped
    /// points to the same pixels: camera-frame coordinates scale uniformly.
    pub fn apply_to_pose(&self, pose: &Pose) -> Pose {
        let rot = renorm(pose.rotation * self.rotation.inverse());
        let trans = self.scale * pose.translation - rot * self.translation;
        Pose {
            rotation: rot,
            translation: trans,
        }
    }
}

//! Three-point camera resection: recovers up to four candidate poses from
//! three 2D-3D correspondences via the classical quartic in the ratios of
//! the camera-to-point distances.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::geometry::{CameraIntrinsics, Pose};

use super::Correspondence;

/// Solves the three-point resection problem.
///
/// Returns an empty set when the 3D points are collinear or two viewing rays
/// coincide. On noise-free input the generating pose is among the candidates
/// with reprojection error at machine-precision level.
pub fn p3p_solve(
    correspondences: &[Correspondence; 3],
    intrinsics: &CameraIntrinsics,
) -> Vec<Pose> {
    let world: Vec<Vector3<f64>> = correspondences
        .iter()
        .map(|c| c.position.coords)
        .collect();
    let bearings: Vec<Vector3<f64>> = correspondences
        .iter()
        .map(|c| intrinsics.bearing(&c.keypoint_uv))
        .collect();

    // degenerate configurations: collinear points or coincident rays
    let span = (world[1] - world[0]).cross(&(world[2] - world[0]));
    let scale = (world[1] - world[0]).norm().max((world[2] - world[0]).norm());
    if span.norm() <= 1e-12 * scale * scale {
        return Vec::new();
    }
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if bearings[i].dot(&bearings[j]).abs() >= 1.0 - 1e-12 {
            return Vec::new();
        }
    }

    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    let cos_alpha = bearings[1].dot(&bearings[2]);
    let cos_beta = bearings[0].dot(&bearings[2]);
    let cos_gamma = bearings[0].dot(&bearings[1]);

    // With u = s2/s1 and v = s3/s1 the law-of-cosines system reduces to
    // u = n(v)/d(v) and a quartic q(v) = 0; the coefficients are expanded
    // with small-polynomial arithmetic instead of one huge closed form.
    let ratio_ac = (a2 - c2) / b2;
    let n = Poly([ratio_ac + 1.0, -2.0 * ratio_ac * cos_beta, ratio_ac - 1.0, 0.0, 0.0]);
    let d = Poly([2.0 * cos_gamma, -2.0 * cos_alpha, 0.0, 0.0, 0.0]);
    let e = Poly([c2 / b2, -2.0 * (c2 / b2) * cos_beta, c2 / b2, 0.0, 0.0]);

    let d_sq = d.mul(&d);
    let quartic = n
        .mul(&n)
        .add(&d_sq)
        .add(&n.mul(&d).scale(-2.0 * cos_gamma))
        .add(&d_sq.mul(&e).scale(-1.0));

    let mut poses = Vec::new();
    for v in real_roots(&quartic.0) {
        if !(v.is_finite() && v > 0.0) {
            continue;
        }
        let denom = d.eval(v);
        if denom.abs() < 1e-12 {
            continue;
        }
        let u = n.eval(v) / denom;
        if u <= 0.0 {
            continue;
        }
        let s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_beta);
        if !(s1_sq.is_finite() && s1_sq > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let (s2, s3) = (u * s1, v * s1);

        let cam = [bearings[0] * s1, bearings[1] * s2, bearings[2] * s3];
        if let Some(pose) = rigid_from_three(&world, &cam) {
            if !poses.iter().any(|p: &Pose| {
                let (dr, dt) = p.delta(&pose);
                dr < 1e-9 && dt < 1e-9
            }) {
                poses.push(pose);
            }
        }
    }
    poses
}

/// Closed-form rigid world-to-camera transform from three exact point pairs,
/// built from matched orthonormal triads.
fn rigid_from_three(world: &[Vector3<f64>], cam: &[Vector3<f64>]) -> Option<Pose> {
    let triad = |p: &[Vector3<f64>]| -> Option<Matrix3<f64>> {
        let x = (p[1] - p[0]).try_normalize(1e-12)?;
        let mut y = p[2] - p[0];
        y -= x * y.dot(&x);
        let y = y.try_normalize(1e-12)?;
        let z = x.cross(&y);
        Some(Matrix3::from_columns(&[x, y, z]))
    };
    let bw = triad(world)?;
    let bc = triad(cam)?;
    let rot_mat = bc * bw.transpose();
    let rotation = UnitQuaternion::from_matrix(&rot_mat);
    let translation = cam[0] - rotation * world[0];
    Some(Pose::new(rotation, translation))
}

/// Dense polynomial with coefficients in ascending power order.
#[derive(Clone, Copy)]
struct Poly([f64; 5]);

impl Poly {
    fn mul(&self, other: &Poly) -> Poly {
        let mut out = [0.0; 5];
        for (i, &a) in self.0.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in other.0.iter().enumerate() {
                if i + j < 5 {
                    out[i + j] += a * b;
                }
            }
        }
        Poly(out)
    }

    fn add(&self, other: &Poly) -> Poly {
        let mut out = self.0;
        for (o, b) in out.iter_mut().zip(other.0) {
            *o += b;
        }
        Poly(out)
    }

    fn scale(&self, s: f64) -> Poly {
        let mut out = self.0;
        for o in out.iter_mut() {
            *o *= s;
        }
        Poly(out)
    }

    fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }
}

/// Real roots of a polynomial of degree <= 4 (ascending coefficients), via
/// companion-matrix eigenvalues polished with a few Newton steps.
fn real_roots(coeffs: &[f64; 5]) -> Vec<f64> {
    let max_mag = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if max_mag == 0.0 {
        return Vec::new();
    }
    let mut degree = 4;
    while degree > 0 && coeffs[degree].abs() < 1e-13 * max_mag {
        degree -= 1;
    }
    if degree == 0 {
        return Vec::new();
    }

    let lead = coeffs[degree];
    let mut companion = nalgebra::DMatrix::<f64>::zeros(degree, degree);
    for row in 1..degree {
        companion[(row, row - 1)] = 1.0;
    }
    for row in 0..degree {
        companion[(row, degree - 1)] = -coeffs[row] / lead;
    }

    let eigen = companion.complex_eigenvalues();
    let mut roots = Vec::new();
    for ev in eigen.iter() {
        if ev.im.abs() > 1e-6 * (1.0 + ev.re.abs()) {
            continue;
        }
        let mut x = ev.re;
        // Newton polish on the full quintic-coefficient array
        for _ in 0..5 {
            let f = horner(coeffs, x);
            let fp = horner_derivative(coeffs, x);
            if fp.abs() < 1e-300 {
                break;
            }
            let step = f / fp;
            x -= step;
            if step.abs() < 1e-14 * (1.0 + x.abs()) {
                break;
            }
        }
        if roots.iter().all(|&r: &f64| (r - x).abs() > 1e-9 * (1.0 + x.abs())) {
            roots.push(x);
        }
    }
    roots
}

fn horner(coeffs: &[f64; 5], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn horner_derivative(coeffs: &[f64; 5], x: f64) -> f64 {
    let mut acc = 0.0;
    for i in (1..5).rev() {
        acc = acc * x + coeffs[i] * i as f64;
    }
    acc
}

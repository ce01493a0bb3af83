use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3};

use super::{GeometryError, SimilarityTransform};

/// Residuals of a similarity-transform fit.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentReport {
    /// Root-mean-square residual over the input pairs, meters.
    pub rms: f64,
    /// Largest single residual, meters.
    pub max: f64,
}

/// Least-squares similarity transform from `model_points` onto
/// `world_points` (Umeyama's closed-form solution): minimizes
/// `sum_i || s * R * m_i + t - w_i ||^2`.
///
/// Needs at least three non-collinear pairs; the caller should pick better
/// control points when [`GeometryError::CollinearPoints`] comes back.
pub fn umeyama_align(
    model_points: &[Point3<f64>],
    world_points: &[Point3<f64>],
) -> Result<(SimilarityTransform, AlignmentReport), GeometryError> {
    let n = model_points.len();
    if n < 3 || world_points.len() != n {
        return Err(GeometryError::NotEnoughPoints {
            needed: 3,
            got: n.min(world_points.len()),
        });
    }

    let inv_n = 1.0 / n as f64;
    let model_mean: Vector3<f64> = model_points.iter().map(|p| p.coords).sum::<Vector3<f64>>() * inv_n;
    let world_mean: Vector3<f64> = world_points.iter().map(|p| p.coords).sum::<Vector3<f64>>() * inv_n;

    let mut cross = Matrix3::<f64>::zeros();
    let mut model_var = 0.0;
    for (m, w) in model_points.iter().zip(world_points) {
        let dm = m.coords - model_mean;
        let dw = w.coords - world_mean;
        cross += dw * dm.transpose();
        model_var += dm.norm_squared();
    }
    cross *= inv_n;
    model_var *= inv_n;

    let svd = cross.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::CollinearPoints),
    };
    // Collinear inputs leave the second singular value at (numerical) zero.
    let s = svd.singular_values;
    if model_var <= f64::EPSILON || s[1] <= 1e-12 * s[0].max(1.0) {
        return Err(GeometryError::CollinearPoints);
    }

    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        d.z = -1.0;
    }
    let rotation_mat = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = (s[0] * d.x + s[1] * d.y + s[2] * d.z) / model_var;
    if scale <= 0.0 {
        return Err(GeometryError::CollinearPoints);
    }
    let rotation = UnitQuaternion::from_matrix(&rotation_mat);
    let translation = world_mean - scale * (rotation_mat * model_mean);

    let transform = SimilarityTransform::new(scale, rotation, translation);
    let mut sum_sq = 0.0;
    let mut max = 0.0_f64;
    for (m, w) in model_points.iter().zip(world_points) {
        let r = (transform.apply(m) - w).norm();
        sum_sq += r * r;
        max = max.max(r);
    }
    let report = AlignmentReport {
        rms: (sum_sq * inv_n).sqrt(),
        max,
    };
    Ok((transform, report))
}

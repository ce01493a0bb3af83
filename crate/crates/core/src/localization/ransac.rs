//! RANSAC pose estimation over 2D-3D correspondences with a Gauss-Newton
//! polish on the consensus set.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, SVector, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{project, CameraIntrinsics, Pose};

use super::p3p::p3p_solve;
use super::{Correspondence, LocalizeError, RansacConfig};

/// Consensus pose with its inlier bookkeeping.
#[derive(Debug, Clone)]
pub struct RansacEstimate {
    pub pose: Pose,
    /// Inlier flag per input correspondence.
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// Mean reprojection error over the inliers, pixels.
    pub mean_inlier_error: f64,
    /// Hypotheses evaluated before the adaptive exit.
    pub iterations: usize,
}

/// Robust pose estimation: sample three correspondences, solve P3P,
/// disambiguate the candidates with a fourth sample, score by inlier count,
/// and refine the winner on its consensus set. Deterministic for a given
/// `seed`.
pub fn ransac_pnp(
    correspondences: &[Correspondence],
    intrinsics: &CameraIntrinsics,
    config: &RansacConfig,
    seed: u64,
) -> Result<RansacEstimate, LocalizeError> {
    let n = correspondences.len();
    if n < 4 {
        return Err(LocalizeError::InsufficientCorrespondences { got: n });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_pose: Option<Pose> = None;
    let mut best_count = 0usize;
    let mut best_error = f64::INFINITY;
    let mut iterations = 0usize;

    while iterations < config.max_iterations {
        iterations += 1;
        let sample = rand::seq::index::sample(&mut rng, n, 4).into_vec();
        let minimal = [
            correspondences[sample[0]].clone(),
            correspondences[sample[1]].clone(),
            correspondences[sample[2]].clone(),
        ];
        let candidates = p3p_solve(&minimal, intrinsics);
        if candidates.is_empty() {
            continue;
        }

        // fourth sampled correspondence picks among the quartic's candidates
        let probe = &correspondences[sample[3]];
        let Some(candidate) = candidates.into_iter().min_by(|a, b| {
            reprojection_error(a, intrinsics, probe)
                .total_cmp(&reprojection_error(b, intrinsics, probe))
        }) else {
            continue;
        };

        let (count, mean_err) = score(&candidate, intrinsics, correspondences, config.inlier_threshold);
        if count > best_count || (count == best_count && mean_err < best_error) {
            best_count = count;
            best_error = mean_err;
            best_pose = Some(candidate);

            // adaptive exit: enough iterations for an all-inlier 4-sample
            let w = count as f64 / n as f64;
            let p_good = w.powi(4);
            if p_good > 0.0 {
                let needed = ((1.0 - config.confidence).ln() / (1.0 - p_good).max(1e-12).ln()).ceil();
                if needed.is_finite() && iterations as f64 >= needed {
                    break;
                }
            }
        }
    }

    let Some(pose) = best_pose else {
        return Err(LocalizeError::InsufficientInliers {
            best: 0,
            min: config.min_inliers,
        });
    };
    if best_count < config.min_inliers {
        return Err(LocalizeError::InsufficientInliers {
            best: best_count,
            min: config.min_inliers,
        });
    }

    let mask = inlier_mask(&pose, intrinsics, correspondences, config.inlier_threshold);
    let consensus: Vec<Correspondence> = correspondences
        .iter()
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|(c, _)| c.clone())
        .collect();
    let refined = refine_pose(&pose, &consensus, intrinsics, 10, config.inlier_threshold);

    // the polish must never lose consensus; fall back to the raw pose if the
    // recount drops
    let (refined_count, refined_err) =
        score(&refined, intrinsics, correspondences, config.inlier_threshold);
    let (pose, count, mean_err, mask) = if refined_count >= best_count {
        let mask = inlier_mask(&refined, intrinsics, correspondences, config.inlier_threshold);
        (refined, refined_count, refined_err, mask)
    } else {
        (pose, best_count, best_error, mask)
    };

    Ok(RansacEstimate {
        pose,
        inliers: mask,
        inlier_count: count,
        mean_inlier_error: mean_err,
        iterations,
    })
}

fn reprojection_error(pose: &Pose, intrinsics: &CameraIntrinsics, c: &Correspondence) -> f64 {
    match project(pose, intrinsics, &c.position) {
        Some(uv) => (uv - c.keypoint_uv).norm(),
        None => f64::INFINITY,
    }
}

fn inlier_mask(
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    correspondences: &[Correspondence],
    threshold: f64,
) -> Vec<bool> {
    correspondences
        .iter()
        .map(|c| reprojection_error(pose, intrinsics, c) <= threshold)
        .collect()
}

fn score(
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    correspondences: &[Correspondence],
    threshold: f64,
) -> (usize, f64) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for c in correspondences {
        let e = reprojection_error(pose, intrinsics, c);
        if e <= threshold {
            count += 1;
            sum += e;
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { f64::INFINITY };
    (count, mean)
}

/// Gauss-Newton refinement of a world-to-camera pose over fixed 3D points,
/// with a Huber loss at `huber_delta` pixels. The update is a left-applied
/// SE(3) increment; iterations stop early on convergence or when a step
/// cannot reduce the cost.
pub fn refine_pose(
    initial: &Pose,
    correspondences: &[Correspondence],
    intrinsics: &CameraIntrinsics,
    max_iterations: usize,
    huber_delta: f64,
) -> Pose {
    let mut pose = *initial;
    let mut cost = robust_cost(&pose, correspondences, intrinsics, huber_delta);

    for _ in 0..max_iterations {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        for c in correspondences {
            let cam = pose.transform_point(&c.position);
            if cam.z <= 1e-9 {
                continue;
            }
            let inv_z = 1.0 / cam.z;
            let proj = Vector2::new(
                intrinsics.fx * cam.x * inv_z + intrinsics.cx,
                intrinsics.fy * cam.y * inv_z + intrinsics.cy,
            );
            let residual = proj - c.keypoint_uv;
            let norm = residual.norm();
            let weight = if norm <= huber_delta { 1.0 } else { huber_delta / norm };

            let d_proj = Matrix2x3::new(
                intrinsics.fx * inv_z,
                0.0,
                -intrinsics.fx * cam.x * inv_z * inv_z,
                0.0,
                intrinsics.fy * inv_z,
                -intrinsics.fy * cam.y * inv_z * inv_z,
            );
            // cam' = exp(w^) * cam + dt  =>  d(cam)/dw = -[cam]x, d(cam)/dt = I
            let mut jac = SMatrix::<f64, 2, 6>::zeros();
            let skew = Matrix3::new(
                0.0, -cam.z, cam.y,
                cam.z, 0.0, -cam.x,
                -cam.y, cam.x, 0.0,
            );
            jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-d_proj * skew));
            jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);

            jtj += jac.transpose() * jac * weight;
            jtr += jac.transpose() * residual * weight;
        }

        let Some(update) = jtj.lu().solve(&(-jtr)) else {
            break;
        };
        if update.norm() < 1e-12 {
            break;
        }

        // step halving keeps the polish monotone
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..5 {
            let omega = Vector3::new(update[0], update[1], update[2]) * step;
            let delta_t = Vector3::new(update[3], update[4], update[5]) * step;
            let rot = nalgebra::UnitQuaternion::from_scaled_axis(omega);
            let candidate = Pose::new(rot * pose.rotation, rot * pose.translation + delta_t);
            let candidate_cost = robust_cost(&candidate, correspondences, intrinsics, huber_delta);
            if candidate_cost < cost {
                pose = candidate;
                cost = candidate_cost;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    pose
}

fn robust_cost(
    pose: &Pose,
    correspondences: &[Correspondence],
    intrinsics: &CameraIntrinsics,
    huber_delta: f64,
) -> f64 {
    correspondences
        .iter()
        .map(|c| {
            let e = reprojection_error(pose, intrinsics, c);
            if e.is_infinite() {
                // behind the camera: fixed large penalty keeps the cost finite
                return 1e6;
            }
            if e <= huber_delta {
                0.5 * e * e
            } else {
                huber_delta * (e - 0.5 * huber_delta)
            }
        })
        .sum()
}

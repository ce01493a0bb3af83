//! Minimal incremental structure-from-motion: essential-matrix seeding from
//! the best-matched frame pair, P3P-RANSAC registration of the remaining
//! frames, pairwise triangulation of new points, and local Gauss-Newton
//! refinement after every registration.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::descriptors::{AnnParams, MatchPair};
use crate::geometry::{project, triangulate, CameraIntrinsics, Pose};
use crate::localization::{ransac_pnp, refine_pose, Correspondence, RansacConfig};

use super::{match_pair, FramePose, MapError, MapPoint, Model3D, PairTask, SurveyFrame};

/// Reconstruction parameters.
#[derive(Debug, Clone, Copy)]
pub struct SfmConfig {
    /// Lowe ratio threshold for pair matching (squared-distance ratio).
    pub ratio_threshold: f32,
    /// Minimum triangulation parallax, radians.
    pub min_parallax: f64,
    /// Reprojection inlier threshold at map construction, pixels. Tighter
    /// than the online threshold since survey data is the reference.
    pub map_inlier_px: f64,
    /// Huber loss scale for local refinement, pixels.
    pub huber_px: f64,
    /// Gauss-Newton alternation rounds after each registration.
    pub refine_iterations: usize,
    /// Minimum essential-matrix inliers for a usable seed pair.
    pub min_seed_matches: usize,
    /// Seed pairs tried (best-matched first) before giving up.
    pub max_seed_candidates: usize,
    /// RANSAC iterations for the essential matrix.
    pub essential_iterations: usize,
    /// Epipolar inlier threshold for the essential matrix, pixels.
    pub essential_threshold_px: f64,
    /// Minimum correspondences to attempt a registration.
    pub min_register_correspondences: usize,
    /// ANN index parameters for the assembled model.
    pub index_params: AnnParams,
}

impl Default for SfmConfig {
    fn default() -> Self {
        Self {
            ratio_threshold: 0.7,
            min_parallax: crate::geometry::DEFAULT_MIN_PARALLAX_RAD,
            map_inlier_px: 4.0,
            huber_px: 2.0,
            refine_iterations: 5,
            min_seed_matches: 30,
            max_seed_candidates: 30,
            essential_iterations: 300,
            essential_threshold_px: 2.0,
            min_register_correspondences: 12,
            index_params: AnnParams::default(),
        }
    }
}

/// Summary counters for a reconstruction run.
#[derive(Debug, Clone, Copy, Default)]
pub struct SfmReport {
    pub frames_in_pairs: usize,
    pub frames_registered: usize,
    pub points_created: usize,
}

/// Runs minimal incremental SfM over the scheduled pairs and returns the
/// unaligned, uncompressed model.
///
/// Frames that never appear in a pair (non-anchor frames) cannot register;
/// registration failures are skipped, not fatal. Deterministic for a fixed
/// `seed`; a different seed changes only the model's gauge.
pub fn reconstruct(
    frames: &[SurveyFrame],
    pairs: &[PairTask],
    intrinsics: &CameraIntrinsics,
    config: &SfmConfig,
    seed: u64,
) -> Result<(Model3D, SfmReport), MapError> {
    if frames.len() < 2 || pairs.is_empty() {
        return Err(MapError::SeedFailure);
    }

    // stage 1: match every scheduled pair (independent tasks, stable order)
    let pair_matches: Vec<Vec<MatchPair>> = pairs
        .par_iter()
        .map(|task| match_pair(task, frames, config.ratio_threshold).unwrap_or_default())
        .collect();

    // stage 2: connect matches into multi-frame tracks
    let tracks = build_tracks(frames, pairs, &pair_matches);

    // stage 3: seed from the best-matched pair with real parallax
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        pair_matches[b]
            .len()
            .cmp(&pair_matches[a].len())
            .then(a.cmp(&b))
    });

    let mut seed_init = None;
    for &task_idx in order.iter().take(config.max_seed_candidates) {
        let task = &pairs[task_idx];
        let matches = &pair_matches[task_idx];
        if matches.len() < config.min_seed_matches.max(8) {
            continue;
        }
        if let Some(init) = essential_init(
            &frames[task.frame_a],
            &frames[task.frame_b],
            matches,
            intrinsics,
            config,
            seed ^ task_idx as u64,
        ) {
            seed_init = Some((task_idx, init));
            break;
        }
    }
    let Some((seed_task_idx, seed_pose_b)) = seed_init else {
        return Err(MapError::SeedFailure);
    };
    let seed_task = &pairs[seed_task_idx];

    let mut poses: BTreeMap<usize, Pose> = BTreeMap::new();
    poses.insert(seed_task.frame_a, Pose::identity());
    poses.insert(seed_task.frame_b, seed_pose_b);

    // stage 4: triangulate the seed pair through its tracks
    let mut builder = MapBuilderState {
        frames,
        intrinsics: *intrinsics,
        config: *config,
        tracks,
        track_point: Vec::new(),
        points: Vec::new(),
    };
    builder.track_point = vec![None; builder.tracks.len()];
    builder.triangulate_tracks_between(seed_task.frame_a, seed_task.frame_b, &poses);

    // stage 5: register remaining frames against the growing map
    let mut last_attempt_count: BTreeMap<usize, usize> = BTreeMap::new();
    loop {
        let candidate = builder.best_candidate(&poses, &last_attempt_count);
        let Some((frame_idx, correspondences, keypoint_indices)) = candidate else {
            break;
        };
        last_attempt_count.insert(frame_idx, correspondences.len());

        let ransac_config = RansacConfig {
            inlier_threshold: config.map_inlier_px,
            min_inliers: config.min_register_correspondences,
            ..RansacConfig::default()
        };
        let estimate = match ransac_pnp(
            &correspondences,
            intrinsics,
            &ransac_config,
            seed ^ 0x5f5f ^ frame_idx as u64,
        ) {
            Ok(est) => est,
            Err(_) => continue, // registration failure: skip, not fatal
        };
        poses.insert(frame_idx, estimate.pose);

        // attach the inlier observations to their points
        let frame_id = frames[frame_idx].frame_id;
        for ((corr, &kp_index), &is_inlier) in correspondences
            .iter()
            .zip(&keypoint_indices)
            .zip(&estimate.inliers)
        {
            if !is_inlier {
                continue;
            }
            let point = &mut builder.points[corr.point_id as usize];
            if point.observations.iter().any(|&(f, _)| f == frame_id) {
                continue;
            }
            point.observations.push((frame_id, kp_index));
            point
                .descriptors
                .push(frames[frame_idx].descriptors[kp_index as usize].clone());
        }

        builder.triangulate_new_for_frame(frame_idx, &poses);
        builder.refine_local(frame_idx, &mut poses);
    }

    // stage 6: assemble
    let frames_in_pairs = {
        let mut seen: Vec<usize> = pairs
            .iter()
            .flat_map(|t| [t.frame_a, t.frame_b])
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    let report = SfmReport {
        frames_in_pairs,
        frames_registered: poses.len(),
        points_created: builder.points.len(),
    };

    let points: Vec<MapPoint> = builder
        .points
        .into_iter()
        .filter(|p| p.observations.len() >= 2)
        .collect();
    if points.is_empty() {
        return Err(MapError::SeedFailure);
    }
    let frame_poses: Vec<FramePose> = poses
        .iter()
        .map(|(&idx, &pose)| FramePose {
            frame_id: frames[idx].frame_id,
            pose,
        })
        .collect();
    let model = Model3D::assemble(
        points,
        frame_poses,
        *intrinsics,
        None,
        Vec::new(),
        config.index_params,
        seed,
    );
    Ok((model, report))
}

/// A feature track: observations of one scene point across frames.
struct Track {
    /// (frame index, keypoint index), sorted by frame index.
    members: Vec<(usize, u32)>,
}

struct MapBuilderState<'a> {
    frames: &'a [SurveyFrame],
    intrinsics: CameraIntrinsics,
    config: SfmConfig,
    tracks: Vec<Track>,
    track_point: Vec<Option<u32>>,
    points: Vec<MapPoint>,
}

impl<'a> MapBuilderState<'a> {
    fn keypoint_uv(&self, frame_idx: usize, kp: u32) -> Vector2<f64> {
        self.frames[frame_idx].keypoints[kp as usize].uv()
    }

    /// Creates points for tracks observed in both `a` and `b`.
    fn triangulate_tracks_between(&mut self, a: usize, b: usize, poses: &BTreeMap<usize, Pose>) {
        let pose_a = poses[&a];
        let pose_b = poses[&b];
        for track_idx in 0..self.tracks.len() {
            if self.track_point[track_idx].is_some() {
                continue;
            }
            let members = &self.tracks[track_idx].members;
            let Some(&(_, kp_a)) = members.iter().find(|(f, _)| *f == a) else {
                continue;
            };
            let Some(&(_, kp_b)) = members.iter().find(|(f, _)| *f == b) else {
                continue;
            };
            let uv_a = self.keypoint_uv(a, kp_a);
            let uv_b = self.keypoint_uv(b, kp_b);
            if let Ok(tri) = triangulate(
                &pose_a,
                &pose_b,
                &uv_a,
                &uv_b,
                &self.intrinsics,
                self.config.min_parallax,
            ) {
                if tri.error_a <= self.config.map_inlier_px && tri.error_b <= self.config.map_inlier_px {
                    self.create_point(track_idx, tri.point, poses);
                }
            }
        }
    }

    /// Creates a map point for a track, attaching every registered
    /// observation that reprojects within the map threshold. Requires at
    /// least two valid observations.
    fn create_point(
        &mut self,
        track_idx: usize,
        position: Point3<f64>,
        poses: &BTreeMap<usize, Pose>,
    ) {
        let mut observations = Vec::new();
        let mut descriptors = Vec::new();
        for &(frame_idx, kp) in &self.tracks[track_idx].members {
            let Some(pose) = poses.get(&frame_idx) else {
                continue;
            };
            let uv = self.keypoint_uv(frame_idx, kp);
            let ok = match project(pose, &self.intrinsics, &position) {
                Some(proj) => (proj - uv).norm() <= self.config.map_inlier_px,
                None => false,
            };
            if ok {
                observations.push((self.frames[frame_idx].frame_id, kp));
                descriptors.push(self.frames[frame_idx].descriptors[kp as usize].clone());
            }
        }
        if observations.len() < 2 {
            return;
        }
        let point_id = self.points.len() as u32;
        self.points.push(MapPoint {
            point_id,
            position,
            observations,
            descriptors,
        });
        self.track_point[track_idx] = Some(point_id);
    }

    /// The unregistered frame with the most 2D-3D correspondences. A frame
    /// is only eligible if its correspondence count grew since its last
    /// failed attempt.
    fn best_candidate(
        &self,
        poses: &BTreeMap<usize, Pose>,
        last_attempt: &BTreeMap<usize, usize>,
    ) -> Option<(usize, Vec<Correspondence>, Vec<u32>)> {
        let mut best: Option<(usize, Vec<Correspondence>, Vec<u32>)> = None;
        for frame_idx in 0..self.frames.len() {
            if poses.contains_key(&frame_idx) {
                continue;
            }
            let (corrs, kps) = self.correspondences_for(frame_idx);
            if corrs.len() < self.config.min_register_correspondences {
                continue;
            }
            if let Some(&attempted) = last_attempt.get(&frame_idx) {
                if corrs.len() <= attempted {
                    continue;
                }
            }
            let better = match &best {
                Some((_, existing, _)) => corrs.len() > existing.len(),
                None => true,
            };
            if better {
                best = Some((frame_idx, corrs, kps));
            }
        }
        best
    }

    /// 2D-3D correspondences of a frame via its tracks, with the keypoint
    /// index of each correspondence in a parallel vector.
    fn correspondences_for(&self, frame_idx: usize) -> (Vec<Correspondence>, Vec<u32>) {
        let mut corrs = Vec::new();
        let mut kps = Vec::new();
        for (track_idx, track) in self.tracks.iter().enumerate() {
            let Some(point_id) = self.track_point[track_idx] else {
                continue;
            };
            let Some(&(_, kp)) = track.members.iter().find(|(f, _)| *f == frame_idx) else {
                continue;
            };
            corrs.push(Correspondence {
                keypoint_uv: self.keypoint_uv(frame_idx, kp),
                point_id,
                position: self.points[point_id as usize].position,
                descriptor_distance: 0.0,
                projection_error: None,
            });
            kps.push(kp);
        }
        (corrs, kps)
    }

    /// Triangulates tracks that pass through a newly registered frame and
    /// still lack a point, pairing against the registered observation with
    /// the longest baseline.
    fn triangulate_new_for_frame(&mut self, frame_idx: usize, poses: &BTreeMap<usize, Pose>) {
        let pose_f = poses[&frame_idx];
        let center_f = pose_f.center();
        for track_idx in 0..self.tracks.len() {
            if self.track_point[track_idx].is_some() {
                continue;
            }
            let members = &self.tracks[track_idx].members;
            let Some(&(_, kp_f)) = members.iter().find(|(f, _)| *f == frame_idx) else {
                continue;
            };
            let partner = members
                .iter()
                .filter(|(f, _)| *f != frame_idx && poses.contains_key(f))
                .max_by(|(fa, _), (fb, _)| {
                    let da = (poses[fa].center() - center_f).norm();
                    let db = (poses[fb].center() - center_f).norm();
                    da.total_cmp(&db)
                });
            let Some(&(g, kp_g)) = partner else {
                continue;
            };
            let uv_f = self.keypoint_uv(frame_idx, kp_f);
            let uv_g = self.keypoint_uv(g, kp_g);
            if let Ok(tri) = triangulate(
                &pose_f,
                &poses[&g],
                &uv_f,
                &uv_g,
                &self.intrinsics,
                self.config.min_parallax,
            ) {
                if tri.error_a <= self.config.map_inlier_px && tri.error_b <= self.config.map_inlier_px {
                    self.create_point(track_idx, tri.point, poses);
                }
            }
        }
    }

    /// Resection-intersection alternation: refine the new pose against its
    /// points, then each observed point against its registered frames.
    fn refine_local(&mut self, frame_idx: usize, poses: &mut BTreeMap<usize, Pose>) {
        let frame_id = self.frames[frame_idx].frame_id;
        let observed: Vec<u32> = self
            .points
            .iter()
            .filter(|p| p.observations.iter().any(|&(f, _)| f == frame_id))
            .map(|p| p.point_id)
            .collect();
        if observed.is_empty() {
            return;
        }
        let frame_row: BTreeMap<u32, usize> = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| (f.frame_id, i))
            .collect();

        for _ in 0..self.config.refine_iterations {
            // pose step
            let corrs: Vec<Correspondence> = observed
                .iter()
                .filter_map(|&pid| {
                    let p = &self.points[pid as usize];
                    let (_, kp) = *p.observations.iter().find(|&&(f, _)| f == frame_id)?;
                    Some(Correspondence {
                        keypoint_uv: self.keypoint_uv(frame_idx, kp),
                        point_id: pid,
                        position: p.position,
                        descriptor_distance: 0.0,
                        projection_error: None,
                    })
                })
                .collect();
            let refined = refine_pose(
                &poses[&frame_idx],
                &corrs,
                &self.intrinsics,
                1,
                self.config.huber_px,
            );
            poses.insert(frame_idx, refined);

            // point steps
            for &pid in &observed {
                let point = &self.points[pid as usize];
                let observations: Vec<(Pose, Vector2<f64>)> = point
                    .observations
                    .iter()
                    .filter_map(|&(fid, kp)| {
                        let row = *frame_row.get(&fid)?;
                        let pose = poses.get(&row)?;
                        Some((*pose, self.keypoint_uv(row, kp)))
                    })
                    .collect();
                if observations.len() < 2 {
                    continue;
                }
                let new_pos = refine_point(
                    &point.position,
                    &observations,
                    &self.intrinsics,
                    self.config.huber_px,
                );
                self.points[pid as usize].position = new_pos;
            }
        }
    }
}

/// One Gauss-Newton step on a 3D point position over its observations.
fn refine_point(
    position: &Point3<f64>,
    observations: &[(Pose, Vector2<f64>)],
    intrinsics: &CameraIntrinsics,
    huber_px: f64,
) -> Point3<f64> {
    let mut jtj = Matrix3::<f64>::zeros();
    let mut jtr = Vector3::<f64>::zeros();
    for (pose, uv) in observations {
        let cam = pose.transform_point(position);
        if cam.z <= 1e-9 {
            continue;
        }
        let inv_z = 1.0 / cam.z;
        let proj = Vector2::new(
            intrinsics.fx * cam.x * inv_z + intrinsics.cx,
            intrinsics.fy * cam.y * inv_z + intrinsics.cy,
        );
        let residual = proj - uv;
        let norm = residual.norm();
        let weight = if norm <= huber_px { 1.0 } else { huber_px / norm };
        let d_proj = nalgebra::Matrix2x3::new(
            intrinsics.fx * inv_z,
            0.0,
            -intrinsics.fx * cam.x * inv_z * inv_z,
            0.0,
            intrinsics.fy * inv_z,
            -intrinsics.fy * cam.y * inv_z * inv_z,
        );
        let jac = d_proj * pose.rotation.to_rotation_matrix().matrix();
        jtj += jac.transpose() * jac * weight;
        jtr += jac.transpose() * residual * weight;
    }
    match jtj.try_inverse() {
        Some(inv) => Point3::from(position.coords - inv * jtr),
        None => *position,
    }
}

/// Union-find over per-frame keypoints; tracks with two keypoints in the
/// same frame are inconsistent and dropped.
fn build_tracks(
    frames: &[SurveyFrame],
    pairs: &[PairTask],
    pair_matches: &[Vec<MatchPair>],
) -> Vec<Track> {
    let mut offsets = Vec::with_capacity(frames.len() + 1);
    let mut total = 0usize;
    for frame in frames {
        offsets.push(total);
        total += frame.keypoints.len();
    }
    offsets.push(total);

    let mut dsu = DisjointSet::new(total);
    for (task, matches) in pairs.iter().zip(pair_matches) {
        for m in matches {
            let a = offsets[task.frame_a] + m.query_index;
            let b = offsets[task.frame_b] + m.target_index;
            dsu.union(a, b);
        }
    }

    let mut groups: BTreeMap<usize, Vec<(usize, u32)>> = BTreeMap::new();
    for (frame_idx, frame) in frames.iter().enumerate() {
        for kp in 0..frame.keypoints.len() {
            let node = offsets[frame_idx] + kp;
            let root = dsu.find(node);
            if dsu.size(root) < 2 {
                continue;
            }
            groups
                .entry(root)
                .or_default()
                .push((frame_idx, kp as u32));
        }
    }

    groups
        .into_values()
        .filter(|members| {
            // reject intra-frame conflicts
            members.windows(2).all(|w| w[0].0 != w[1].0)
        })
        .map(|members| Track { members })
        .collect()
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }

    fn size(&mut self, x: usize) -> usize {
        let root = self.find(x);
        self.size[root]
    }
}

/// Essential-matrix initialization of the seed pair: 8-point RANSAC on
/// normalized coordinates, rank-2 projection, cheirality disambiguation of
/// the four (R, t) candidates, and a median-parallax gate.
fn essential_init(
    frame_a: &SurveyFrame,
    frame_b: &SurveyFrame,
    matches: &[MatchPair],
    intrinsics: &CameraIntrinsics,
    config: &SfmConfig,
    seed: u64,
) -> Option<Pose> {
    let norm_a: Vec<Vector3<f64>> = matches
        .iter()
        .map(|m| intrinsics.unproject_pixel(&frame_a.keypoints[m.query_index].uv()))
        .collect();
    let norm_b: Vec<Vector3<f64>> = matches
        .iter()
        .map(|m| intrinsics.unproject_pixel(&frame_b.keypoints[m.target_index].uv()))
        .collect();
    let n = matches.len();
    let threshold = config.essential_threshold_px / intrinsics.fx;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_inliers: Vec<usize> = Vec::new();
    for _ in 0..config.essential_iterations {
        let sample = rand::seq::index::sample(&mut rng, n, 8.min(n)).into_vec();
        let Some(e) = eight_point(&sample, &norm_a, &norm_b) else {
            continue;
        };
        let inliers: Vec<usize> = (0..n)
            .filter(|&i| sampson_error(&e, &norm_a[i], &norm_b[i]) <= threshold)
            .collect();
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
        }
    }
    if best_inliers.len() < config.min_seed_matches {
        return None;
    }
    // refit on the consensus set
    let e = eight_point(&best_inliers, &norm_a, &norm_b)?;

    // decompose into the four candidates and pick by cheirality
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut u = u;
    let mut v_t = v_t;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = u.column(2).into_owned();

    let mut best: Option<(usize, f64, Pose)> = None;
    for rot in [r1, r2] {
        for sign in [1.0, -1.0] {
            let pose_b = Pose::new(UnitQuaternion::from_matrix(&rot), t * sign);
            let pose_a = Pose::identity();
            let mut front = 0usize;
            let mut parallaxes = Vec::new();
            for &i in &best_inliers {
                let uv_a = frame_a.keypoints[matches[i].query_index].uv();
                let uv_b = frame_b.keypoints[matches[i].target_index].uv();
                if let Ok(tri) = triangulate(
                    &pose_a,
                    &pose_b,
                    &uv_a,
                    &uv_b,
                    intrinsics,
                    0.0,
                ) {
                    front += 1;
                    parallaxes.push(tri.parallax);
                }
            }
            if parallaxes.is_empty() {
                continue;
            }
            parallaxes.sort_by(|a, b| a.total_cmp(b));
            let median_parallax = parallaxes[parallaxes.len() / 2];
            if best.as_ref().map(|(f, _, _)| front > *f).unwrap_or(true) {
                best = Some((front, median_parallax, pose_b));
            }
        }
    }

    let (front, median_parallax, pose_b) = best?;
    if front < config.min_seed_matches || median_parallax < config.min_parallax {
        return None;
    }
    Some(pose_b)
}

/// Linear eight-point estimate of the essential matrix (rank-2 projected).
fn eight_point(
    sample: &[usize],
    norm_a: &[Vector3<f64>],
    norm_b: &[Vector3<f64>],
) -> Option<Matrix3<f64>> {
    if sample.len() < 8 {
        return None;
    }
    let mut design = nalgebra::DMatrix::<f64>::zeros(sample.len(), 9);
    for (row, &i) in sample.iter().enumerate() {
        let (xa, xb) = (&norm_a[i], &norm_b[i]);
        for p in 0..3 {
            for q in 0..3 {
                design[(row, 3 * p + q)] = xb[p] * xa[q];
            }
        }
    }
    let svd = design.svd(false, true);
    let v_t = svd.v_t?;
    let h = v_t.row(v_t.nrows() - 1);
    let e = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);

    // project onto the essential manifold: two equal singular values, rank 2
    let svd_e = e.svd(true, true);
    let (u, v_t) = (svd_e.u?, svd_e.v_t?);
    let s = (svd_e.singular_values[0] + svd_e.singular_values[1]) * 0.5;
    let d = Matrix3::from_diagonal(&Vector3::new(s, s, 0.0));
    Some(u * d * v_t)
}

/// First-order epipolar (Sampson) distance in normalized coordinates.
fn sampson_error(e: &Matrix3<f64>, xa: &Vector3<f64>, xb: &Vector3<f64>) -> f64 {
    let ex_a = e * xa;
    let etx_b = e.transpose() * xb;
    let num: f64 = xb.dot(&ex_a);
    let denom = ex_a.x * ex_a.x + ex_a.y * ex_a.y + etx_b.x * etx_b.x + etx_b.y * etx_b.y;
    if denom <= f64::EPSILON {
        return f64::INFINITY;
    }
    (num * num / denom).sqrt()
}

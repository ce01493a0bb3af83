//! Offline map construction: frame-pair scheduling, descriptor matching,
//! minimal incremental structure-from-motion, model compression, metric
//! alignment, and the serialized model container.

mod io;
mod sfm;

pub use io::{deserialize_model, serialize_model, ModelIoError};
pub use sfm::{reconstruct, SfmConfig};

use std::collections::BTreeMap;

use nalgebra::Point3;
use thiserror::Error;

use crate::descriptors::{ratio_test_match, AnnIndex, AnnParams, Descriptor, MatchPair};
use crate::geometry::{CameraIntrinsics, Keypoint, Pose, SimilarityTransform};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MapError {
    #[error("invalid scheduling parameters: stride {stride} must be positive and below window {window}")]
    InvalidParameters { stride: usize, window: usize },
    #[error("no frame pair passed the parallax/match thresholds; the survey is unusable")]
    SeedFailure,
    #[error("compression removed every point (min_frames too aggressive)")]
    EmptyModel,
    #[error("frame index {0} out of range")]
    FrameOutOfRange(usize),
}

/// One survey video frame reduced to its features.
#[derive(Debug, Clone)]
pub struct SurveyFrame {
    pub frame_id: u32,
    pub timestamp: f64,
    pub keypoints: Vec<Keypoint>,
    /// Parallel to `keypoints`.
    pub descriptors: Vec<Descriptor>,
}

/// A scheduled frame pair with its retained-match budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairTask {
    /// Index of the earlier frame in the survey.
    pub frame_a: usize,
    /// Index of the later frame.
    pub frame_b: usize,
    /// Maximum matches retained for this pair.
    pub match_budget: usize,
}

/// A reconstructed 3D point with its observations.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    /// Stable identifier, assigned at creation and preserved by compression.
    pub point_id: u32,
    pub position: Point3<f64>,
    /// (frame_id, keypoint_index) per observing frame; no duplicate frames.
    pub observations: Vec<(u32, u32)>,
    /// All observed descriptors, or a single mean descriptor after
    /// descriptor compression. Parallel to `observations` until compressed.
    pub descriptors: Vec<Descriptor>,
}

/// Recovered camera pose of a registered survey frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePose {
    pub frame_id: u32,
    pub pose: Pose,
}

/// The compressed survey artifact: point cloud, poses, descriptor index and
/// annotations.
#[derive(Debug, Clone)]
pub struct Model3D {
    pub points: Vec<MapPoint>,
    pub frame_poses: Vec<FramePose>,
    pub intrinsics: CameraIntrinsics,
    /// Present once the model has been scaled into metric world coordinates;
    /// stored points are already in aligned coordinates.
    pub alignment: Option<SimilarityTransform>,
    pub index: AnnIndex,
    /// Descriptor id (index position) to point id.
    pub descriptor_to_point: Vec<u32>,
    pub named_locations: Vec<(String, Point3<f64>)>,
    descriptor_table: Vec<Descriptor>,
    point_row_by_id: BTreeMap<u32, usize>,
}

impl Model3D {
    /// Builds the model from its parts, flattening the point descriptors
    /// into the search table and indexing them.
    pub fn assemble(
        points: Vec<MapPoint>,
        frame_poses: Vec<FramePose>,
        intrinsics: CameraIntrinsics,
        alignment: Option<SimilarityTransform>,
        named_locations: Vec<(String, Point3<f64>)>,
        index_params: AnnParams,
        index_seed: u64,
    ) -> Self {
        assert!(!points.is_empty(), "a model needs at least one point");
        let mut table = Vec::new();
        let mut descriptor_to_point = Vec::new();
        let mut point_row_by_id = BTreeMap::new();
        for (row, point) in points.iter().enumerate() {
            point_row_by_id.insert(point.point_id, row);
            for d in &point.descriptors {
                table.push(d.clone());
                descriptor_to_point.push(point.point_id);
            }
        }
        let index = AnnIndex::build(&table, index_params, index_seed);
        Self {
            points,
            frame_poses,
            intrinsics,
            alignment,
            index,
            descriptor_to_point,
            named_locations,
            descriptor_table: table,
            point_row_by_id,
        }
    }

    /// The flat descriptor table the index searches over.
    pub fn descriptor_table(&self) -> &[Descriptor] {
        &self.descriptor_table
    }

    /// Row of a point in `points` given its stable id.
    pub fn point_index(&self, point_id: u32) -> usize {
        self.point_row_by_id[&point_id]
    }

    pub fn point_by_id(&self, point_id: u32) -> &MapPoint {
        &self.points[self.point_index(point_id)]
    }

    /// Total stored descriptor count.
    pub fn descriptor_count(&self) -> usize {
        self.descriptor_table.len()
    }

    /// Applies a similarity transform in place: point positions and camera
    /// poses move into the new coordinates and the transform is recorded
    /// (composed with any earlier alignment).
    pub fn apply_alignment(&mut self, transform: &SimilarityTransform) {
        for point in &mut self.points {
            point.position = transform.apply(&point.position);
        }
        for fp in &mut self.frame_poses {
            fp.pose = transform.apply_to_pose(&fp.pose);
        }
        for (_, p) in &mut self.named_locations {
            *p = transform.apply(p);
        }
        self.alignment = Some(match &self.alignment {
            Some(previous) => transform.compose(previous),
            None => *transform,
        });
    }
}

/// Enumerates the frame pairs to match: anchors every `stride` frames, each
/// matched against the following anchors up to `window` frames ahead.
///
/// The match budget decays linearly from `base_budget` at distance `stride`
/// down to `ceil(base_budget / 4)` at distance `window`, so distant pairs
/// keep fewer matches.
pub fn schedule_pairs(
    frame_count: usize,
    window: usize,
    stride: usize,
    base_budget: usize,
) -> Result<Vec<PairTask>, MapError> {
    if stride == 0 || stride >= window || base_budget == 0 {
        return Err(MapError::InvalidParameters { stride, window });
    }
    let floor_budget = base_budget.div_ceil(4);
    let span = (window - stride) as u64;
    let mut tasks = Vec::new();
    let mut anchor = 0usize;
    while anchor < frame_count {
        let mut d = stride;
        while d <= window {
            let partner = anchor + d;
            if partner >= frame_count {
                break;
            }
            let decay =
                ((base_budget - floor_budget) as u64 * (d - stride) as u64 / span) as usize;
            tasks.push(PairTask {
                frame_a: anchor,
                frame_b: partner,
                match_budget: base_budget - decay,
            });
            d += stride;
        }
        anchor += stride;
    }
    Ok(tasks)
}

/// Ratio-test matching for one scheduled pair, truncated to the pair budget.
/// Output stays ordered ascending by descriptor distance.
pub fn match_pair(
    task: &PairTask,
    frames: &[SurveyFrame],
    ratio_threshold: f32,
) -> Result<Vec<MatchPair>, MapError> {
    let a = frames.get(task.frame_a).ok_or(MapError::FrameOutOfRange(task.frame_a))?;
    let b = frames.get(task.frame_b).ok_or(MapError::FrameOutOfRange(task.frame_b))?;
    if a.descriptors.is_empty() || b.descriptors.is_empty() {
        return Ok(Vec::new());
    }
    let mut matches = ratio_test_match(&a.descriptors, &b.descriptors, ratio_threshold);
    matches.truncate(task.match_budget);
    Ok(matches)
}

/// Keeps exactly the points observed by at least `min_frames` frames and
/// rebuilds the descriptor table and index. Frame poses are untouched.
pub fn compress_points(model: &Model3D, min_frames: usize) -> Result<Model3D, MapError> {
    let points: Vec<MapPoint> = model
        .points
        .iter()
        .filter(|p| p.observations.len() >= min_frames)
        .cloned()
        .collect();
    if points.is_empty() {
        return Err(MapError::EmptyModel);
    }
    Ok(Model3D::assemble(
        points,
        model.frame_poses.clone(),
        model.intrinsics,
        model.alignment,
        model.named_locations.clone(),
        model.index.params(),
        model.index.seed(),
    ))
}

/// Replaces every point's descriptor set by its single renormalized mean and
/// rebuilds the index; afterwards the stored descriptor count equals the
/// point count.
pub fn compress_descriptors(model: &Model3D) -> Model3D {
    let points: Vec<MapPoint> = model
        .points
        .iter()
        .map(|p| {
            let refs: Vec<&Descriptor> = p.descriptors.iter().collect();
            let mean = Descriptor::mean(&refs).expect("map point with no descriptors");
            MapPoint {
                point_id: p.point_id,
                position: p.position,
                observations: p.observations.clone(),
                descriptors: vec![mean],
            }
        })
        .collect();
    Model3D::assemble(
        points,
        model.frame_poses.clone(),
        model.intrinsics,
        model.alignment,
        model.named_locations.clone(),
        model.index.params(),
        model.index.seed(),
    )
}

impl SimilarityTransform {
    /// Composition `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform::new(
            self.scale * other.scale,
            self.rotation * other.rotation,
            self.scale * (self.rotation * other.translation) + self.translation,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_small_survey() {
        let tasks = schedule_pairs(21, 300, 10, 500).unwrap();
        let pairs: Vec<(usize, usize)> = tasks.iter().map(|t| (t.frame_a, t.frame_b)).collect();
        assert_eq!(pairs, vec![(0, 10), (0, 20), (10, 20)]);
    }

    #[test]
    fn budget_decay_endpoints() {
        let tasks = schedule_pairs(700, 300, 10, 500).unwrap();
        let at = |d: usize| {
            tasks
                .iter()
                .find(|t| t.frame_a == 0 && t.frame_b == d)
                .unwrap()
                .match_budget
        };
        assert_eq!(at(10), 500);
        assert_eq!(at(300), 125);
        // monotone decay in between
        let budgets: Vec<usize> = (1..=30).map(|k| at(10 * k)).collect();
        assert!(budgets.windows(2).all(|w| w[0] >= w[1]));
    }

    /// Oracle: direct enumeration of the scheduling rule.
    #[test]
    fn pair_count_matches_direct_enumeration() {
        let tasks = schedule_pairs(700, 300, 10, 500).unwrap();
        let anchors: Vec<usize> = (0..700).step_by(10).collect();
        assert_eq!(anchors.len(), 70);
        let expected: usize = anchors
            .iter()
            .map(|&i| {
                let remaining = (700 - 1 - i) / 10;
                remaining.min(30)
            })
            .sum();
        assert_eq!(tasks.len(), expected);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(schedule_pairs(100, 10, 10, 500).is_err());
        assert!(schedule_pairs(100, 10, 20, 500).is_err());
        assert!(schedule_pairs(100, 300, 0, 500).is_err());
    }

    fn frame_with(descriptors: Vec<Descriptor>, frame_id: u32) -> SurveyFrame {
        let keypoints = (0..descriptors.len())
            .map(|i| Keypoint::new(i as f64, i as f64, frame_id, 1.0))
            .collect();
        SurveyFrame {
            frame_id,
            timestamp: frame_id as f64 / 30.0,
            keypoints,
            descriptors,
        }
    }

    fn random_descriptor(rng: &mut ChaCha8Rng, dim: usize) -> Descriptor {
        loop {
            let values: Vec<f32> = (0..dim)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        0.0
                    } else {
                        rng.sample::<f64, _>(rand_distr::StandardNormal).abs() as f32
                    }
                })
                .collect();
            if let Ok(d) = Descriptor::new(values) {
                return d;
            }
        }
    }

    #[test]
    fn identical_frames_self_match_at_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let descs: Vec<Descriptor> = (0..30).map(|_| random_descriptor(&mut rng, 64)).collect();
        let frames = vec![frame_with(descs.clone(), 0), frame_with(descs, 1)];
        let task = PairTask {
            frame_a: 0,
            frame_b: 1,
            match_budget: 100,
        };
        let matches = match_pair(&task, &frames, 0.7).unwrap();
        assert_eq!(matches.len(), 30);
        assert!(matches.iter().all(|m| m.distance == 0.0));
        assert!(matches.iter().all(|m| m.query_index == m.target_index));
    }

    #[test]
    fn disjoint_scenes_produce_few_spurious_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a: Vec<Descriptor> = (0..100).map(|_| random_descriptor(&mut rng, 128)).collect();
        let b: Vec<Descriptor> = (0..100).map(|_| random_descriptor(&mut rng, 128)).collect();
        let frames = vec![frame_with(a, 0), frame_with(b, 1)];
        let task = PairTask {
            frame_a: 0,
            frame_b: 1,
            match_budget: 1000,
        };
        let matches = match_pair(&task, &frames, 0.7).unwrap();
        assert!(
            matches.len() <= 5,
            "{} spurious matches between unrelated scenes",
            matches.len()
        );
    }

    #[test]
    fn budget_truncation_keeps_smallest_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let bases: Vec<Descriptor> = (0..200).map(|_| random_descriptor(&mut rng, 64)).collect();
        let noisy: Vec<Descriptor> = bases
            .iter()
            .map(|b| {
                let values: Vec<f32> = b
                    .as_slice()
                    .iter()
                    .map(|&v| v + rng.sample::<f64, _>(rand_distr::StandardNormal) as f32 * 0.02)
                    .collect();
                Descriptor::from_noisy(values).unwrap()
            })
            .collect();
        let frames = vec![frame_with(bases, 0), frame_with(noisy, 1)];
        let untruncated = match_pair(
            &PairTask { frame_a: 0, frame_b: 1, match_budget: 10_000 },
            &frames,
            0.7,
        )
        .unwrap();
        assert!(untruncated.len() > 50);
        let truncated = match_pair(
            &PairTask { frame_a: 0, frame_b: 1, match_budget: 50 },
            &frames,
            0.7,
        )
        .unwrap();
        assert_eq!(truncated.len(), 50);
        assert_eq!(&untruncated[..50], &truncated[..]);
    }

    pub(crate) fn toy_model(obs_counts: &[usize]) -> Model3D {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let points: Vec<MapPoint> = obs_counts
            .iter()
            .enumerate()
            .map(|(i, &n)| MapPoint {
                point_id: i as u32,
                position: Point3::new(i as f64, 0.0, 1.0),
                observations: (0..n).map(|f| (f as u32, i as u32)).collect(),
                descriptors: (0..n).map(|_| random_descriptor(&mut rng, 32)).collect(),
            })
            .collect();
        Model3D::assemble(
            points,
            vec![FramePose { frame_id: 0, pose: Pose::identity() }],
            CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480),
            None,
            Vec::new(),
            AnnParams::default(),
            7,
        )
    }

    #[test]
    fn compress_points_keeps_min_frames() {
        let model = toy_model(&[2, 3, 10, 12]);
        let compressed = compress_points(&model, 10).unwrap();
        assert_eq!(compressed.points.len(), 2);
        assert!(compressed.points.iter().all(|p| p.observations.len() >= 10));
        // identity at min_frames = 2: every point has at least two observations
        let identity = compress_points(&model, 2).unwrap();
        assert_eq!(identity.points.len(), model.points.len());
        // frame poses untouched
        assert_eq!(compressed.frame_poses, model.frame_poses);
        assert!(compress_points(&model, 100).is_err());
    }

    #[test]
    fn compress_points_is_idempotent() {
        let model = toy_model(&[2, 5, 7, 10, 12]);
        let once = compress_points(&model, 6).unwrap();
        let twice = compress_points(&once, 6).unwrap();
        assert_eq!(once.points, twice.points);
        assert_eq!(once.descriptor_to_point, twice.descriptor_to_point);
    }

    #[test]
    fn compress_descriptors_one_per_point() {
        let model = toy_model(&[2, 3, 10]);
        let compressed = compress_descriptors(&model);
        assert_eq!(compressed.points.len(), model.points.len());
        assert_eq!(compressed.descriptor_count(), compressed.points.len());
        for (a, b) in compressed.points.iter().zip(&model.points) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.observations, b.observations);
            assert_eq!(a.descriptors.len(), 1);
        }
    }

    #[test]
    fn alignment_applies_to_points_and_poses() {
        let mut model = toy_model(&[3, 3]);
        let before = model.points[1].position;
        let t = SimilarityTransform::new(
            2.0,
            UnitQuaternion::from_euler_angles(0.0, 0.0, 0.3),
            Vector3::new(1.0, 2.0, 3.0),
        );
        model.apply_alignment(&t);
        let after = model.points[1].position;
        approx::assert_relative_eq!(after, t.apply(&before), epsilon = 1e-12);
        assert!(model.alignment.is_some());

        // composing a second alignment records the product transform
        let t2 = SimilarityTransform::new(0.5, UnitQuaternion::identity(), Vector3::zeros());
        model.apply_alignment(&t2);
        let total = model.alignment.unwrap();
        let p = Point3::new(0.3, -0.7, 2.0);
        approx::assert_relative_eq!(total.apply(&p), t2.apply(&t.apply(&p)), epsilon = 1e-12);
    }
}

//! The per-frame localization loop: predict, track, estimate, filter, plus
//! the background matching path that replenishes the tracking set.

use std::time::Instant;

use nalgebra::Vector2;

use crate::descriptors::Descriptor;
use crate::geometry::CameraIntrinsics;
use crate::mapping::Model3D;
use crate::tracking::{maintain_tracking_set, FreshMatch, SamplingScheduler, TrackingSet};

use super::{
    make_correspondences, ransac_pnp, Correspondence, KalmanConfig, KalmanFilter, PoseMeasurement,
    RansacConfig, DEFAULT_RATIO_THRESHOLD,
};

/// A source of online frames. Implementations provide feature extraction
/// for sampled frames and one-step point tracking between consecutive
/// frames; the driver owns everything else.
pub trait OnlineSource {
    fn intrinsics(&self) -> CameraIntrinsics;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// (frame_id, timestamp seconds) of the frame at `index`.
    fn meta(&self, index: usize) -> (u32, f64);
    /// Full-frame keypoint and descriptor extraction.
    fn extract(&mut self, index: usize) -> (Vec<Vector2<f64>>, Vec<Descriptor>);
    /// Tracks image positions from frame `from_index` to `from_index + 1`.
    fn track_step(
        &mut self,
        from_index: usize,
        points: &[Vector2<f64>],
    ) -> Vec<Option<Vector2<f64>>>;
}

/// How background matching is interleaved with tracking.
#[derive(Debug, Clone)]
pub enum ScheduleMode {
    /// Dispatch when idle; results apply a fixed number of frames later.
    /// Deterministic, and the decision log makes runs replayable.
    FixedLatency,
    /// Replay a recorded dispatch schedule.
    Replay(Vec<usize>),
}

/// Driver options.
#[derive(Debug, Clone)]
pub struct LocalizeOptions {
    pub ransac: RansacConfig,
    pub kalman: KalmanConfig,
    /// Squared-distance ratio threshold for background matching.
    pub ratio_threshold: f32,
    pub tracking_capacity: usize,
    /// Matcher latency in frame-times for the fixed-latency schedule.
    pub matcher_latency_frames: usize,
    /// Consecutive RANSAC failures before localization is considered lost
    /// and matching runs at maximum rate.
    pub relocalize_after: usize,
    pub seed: u64,
    pub schedule: ScheduleMode,
    /// Disabled only by the tracking-decay experiment.
    pub replenish: bool,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            kalman: KalmanConfig::default(),
            ratio_threshold: DEFAULT_RATIO_THRESHOLD,
            tracking_capacity: 500,
            matcher_latency_frames: 30,
            relocalize_after: 90,
            seed: 0,
            schedule: ScheduleMode::FixedLatency,
            replenish: true,
        }
    }
}

/// Per-frame output row.
#[derive(Debug, Clone)]
pub struct FrameEstimate {
    pub frame_id: u32,
    pub timestamp: f64,
    /// Raw RANSAC measurement, absent on failure.
    pub raw: Option<PoseMeasurement>,
    /// Whether the Kalman filter accepted the measurement.
    pub accepted: bool,
    /// Filtered [x, y, z, roll, pitch, yaw], absent before initialization.
    pub filtered: Option<[f64; 6]>,
    pub inliers: usize,
    pub n_corr: usize,
    pub track_count: usize,
}

/// Wall-clock stage totals over a run, seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct TimingReport {
    pub frames: usize,
    pub track_s: f64,
    pub extract_s: f64,
    pub match_s: f64,
    pub pose_s: f64,
    pub filter_s: f64,
    pub total_s: f64,
    pub matched_frames: usize,
}

impl TimingReport {
    pub fn poses_per_second(&self) -> f64 {
        if self.total_s > 0.0 {
            self.frames as f64 / self.total_s
        } else {
            f64::INFINITY
        }
    }
}

/// Full result of a localization run.
#[derive(Debug, Clone)]
pub struct PoseStream {
    pub frames: Vec<FrameEstimate>,
    pub dispatch_log: Vec<usize>,
    pub timing: TimingReport,
}

struct PendingBatch {
    matches: Vec<FreshMatch>,
    apply_at: usize,
}

/// Runs the online pipeline over every frame of `source` against `model`.
///
/// Per frame: track the set forward, predict the filter, optionally dispatch
/// background extraction+matching, fold due matches into the tracking set,
/// build gated correspondences, estimate the pose with RANSAC, and update
/// the filter. After `relocalize_after` consecutive RANSAC failures the
/// scheduler ignores the busy flag and matches every frame until a pose
/// estimate succeeds again.
pub fn localize_stream<S: OnlineSource>(
    model: &Model3D,
    source: &mut S,
    options: &LocalizeOptions,
) -> PoseStream {
    let start = Instant::now();
    let mut timing = TimingReport::default();
    let intrinsics = source.intrinsics();

    let mut scheduler = SamplingScheduler::new(options.matcher_latency_frames);
    let replay: Option<&Vec<usize>> = match &options.schedule {
        ScheduleMode::FixedLatency => None,
        ScheduleMode::Replay(log) => Some(log),
    };
    let mut filter = KalmanFilter::new(options.kalman);
    let mut set = TrackingSet::new(options.tracking_capacity);
    let mut pending: Vec<PendingBatch> = Vec::new();
    let mut frames = Vec::with_capacity(source.len());
    let mut consecutive_failures = 0usize;

    for i in 0..source.len() {
        let (frame_id, timestamp) = source.meta(i);

        // 1. advance the tracking set and the in-flight batches
        let t0 = Instant::now();
        let track_results = if i > 0 && !set.alive.is_empty() {
            source.track_step(i - 1, &set.uvs())
        } else {
            vec![None; 0]
        };
        if i > 0 {
            for batch in pending.iter_mut() {
                let uvs: Vec<Vector2<f64>> = batch.matches.iter().map(|m| m.uv).collect();
                let stepped = source.track_step(i - 1, &uvs);
                batch.matches = batch
                    .matches
                    .iter()
                    .zip(&stepped)
                    .filter_map(|(m, r)| r.map(|uv| FreshMatch { uv, ..*m }))
                    .collect();
            }
        }
        timing.track_s += t0.elapsed().as_secs_f64();

        // 2. filter prediction for gating
        let t0 = Instant::now();
        let lost = consecutive_failures >= options.relocalize_after;
        let predicted = filter.predict(timestamp);
        let gate_pose = if lost { None } else { predicted };
        timing.filter_s += t0.elapsed().as_secs_f64();

        // 3. background dispatch
        let dispatch = match replay {
            Some(log) => log.binary_search(&i).is_ok(),
            None => scheduler.should_dispatch(i, lost),
        };
        if dispatch {
            let t0 = Instant::now();
            let (uvs, descriptors) = source.extract(i);
            timing.extract_s += t0.elapsed().as_secs_f64();
            let t0 = Instant::now();
            let candidates = make_correspondences(
                &uvs,
                &descriptors,
                model,
                gate_pose.as_ref(),
                &options.ransac,
                options.ratio_threshold,
            );
            let matches: Vec<FreshMatch> = candidates
                .iter()
                .map(|c| FreshMatch {
                    point_id: c.point_id,
                    uv: c.keypoint_uv,
                    descriptor_distance: c.descriptor_distance,
                })
                .collect();
            timing.match_s += t0.elapsed().as_secs_f64();
            timing.matched_frames += 1;
            pending.push(PendingBatch {
                matches,
                apply_at: i + options.matcher_latency_frames,
            });
        }

        // 4. fold due batches into the tracking set
        let mut fresh: Vec<FreshMatch> = Vec::new();
        pending.retain(|batch| {
            if batch.apply_at <= i {
                if options.replenish {
                    fresh.extend_from_slice(&batch.matches);
                }
                false
            } else {
                true
            }
        });
        maintain_tracking_set(&mut set, &track_results, &fresh, frame_id);

        // 5. correspondences from the tracking set, gated and ordered
        let mut correspondences: Vec<Correspondence> = set
            .alive
            .iter()
            .filter_map(|t| {
                let point = model.point_by_id(t.point_id);
                let projection_error = gate_pose.as_ref().map(|pose| {
                    match crate::geometry::project(pose, &intrinsics, &point.position) {
                        Some(proj) => (proj - t.current_uv).norm(),
                        None => f64::INFINITY,
                    }
                });
                if let Some(err) = projection_error {
                    if err > options.ransac.projection_gate {
                        return None;
                    }
                }
                Some(Correspondence {
                    keypoint_uv: t.current_uv,
                    point_id: t.point_id,
                    position: point.position,
                    descriptor_distance: t.last_descriptor_distance,
                    projection_error,
                })
            })
            .collect();
        correspondences.sort_by(|a, b| a.descriptor_distance.total_cmp(&b.descriptor_distance));
        correspondences.truncate(options.ransac.top_k);
        let n_corr = correspondences.len();

        // 6. pose estimation
        let t0 = Instant::now();
        let estimate = if n_corr >= 4 {
            ransac_pnp(
                &correspondences,
                &intrinsics,
                &options.ransac,
                options.seed ^ (frame_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            )
            .ok()
        } else {
            None
        };
        timing.pose_s += t0.elapsed().as_secs_f64();

        let raw = estimate.as_ref().map(|est| {
            PoseMeasurement::from_pose(&est.pose, frame_id, est.inlier_count, est.mean_inlier_error)
        });
        match raw {
            Some(_) => consecutive_failures = 0,
            None => consecutive_failures += 1,
        }

        // 7. filter update
        let t0 = Instant::now();
        let accepted = match &raw {
            Some(z) => filter.update(z, timestamp),
            None => false,
        };
        let filtered = filter.state.as_ref().map(|s| {
            let (x, y, z) = s.position();
            let (roll, pitch, yaw) = s.angles();
            [x, y, z, roll, pitch, yaw]
        });
        timing.filter_s += t0.elapsed().as_secs_f64();

        frames.push(FrameEstimate {
            frame_id,
            timestamp,
            raw,
            accepted,
            filtered,
            inliers: estimate.as_ref().map(|e| e.inlier_count).unwrap_or(0),
            n_corr,
            track_count: set.alive.len(),
        });
        timing.frames += 1;
    }

    timing.total_s = start.elapsed().as_secs_f64();
    PoseStream {
        frames,
        dispatch_log: match replay {
            Some(log) => log.clone(),
            None => scheduler.dispatch_log,
        },
        timing,
    }
}

/// CSV header of the pose stream output.
pub const POSE_CSV_HEADER: &str = "frame_id,timestamp,raw_x,raw_y,raw_z,raw_roll,raw_pitch,raw_yaw,accepted,kf_x,kf_y,kf_z,kf_roll,kf_pitch,kf_yaw,inliers,n_corr,track_count";

impl PoseStream {
    /// Serializes the stream with the documented header; raw fields are
    /// empty on RANSAC failure, filter fields before initialization.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.frames.len() * 96);
        out.push_str(POSE_CSV_HEADER);
        out.push('\n');
        for f in &self.frames {
            let raw = match &f.raw {
                Some(z) => format!(
                    "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    z.x, z.y, z.z, z.roll, z.pitch, z.yaw
                ),
                None => ",,,,,".to_string(),
            };
            let kf = match &f.filtered {
                Some(s) => format!(
                    "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    s[0], s[1], s[2], s[3], s[4], s[5]
                ),
                None => ",,,,,".to_string(),
            };
            out.push_str(&format!(
                "{},{:.6},{},{},{},{},{},{}\n",
                f.frame_id,
                f.timestamp,
                raw,
                if f.accepted { 1 } else { 0 },
                kf,
                f.inliers,
                f.n_corr,
                f.track_count
            ));
        }
        out
    }

    /// Parses a pose CSV produced by [`PoseStream::to_csv`].
    pub fn parse_csv(text: &str) -> Result<Vec<FrameEstimate>, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty pose csv")?;
        if header.trim() != POSE_CSV_HEADER {
            return Err(format!("unexpected pose csv header: {header}"));
        }
        let mut frames = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 18 {
                return Err(format!("line {}: expected 18 fields", lineno + 2));
            }
            let parse = |s: &str| -> Result<f64, String> {
                s.parse::<f64>().map_err(|e| format!("line {}: {e}", lineno + 2))
            };
            let frame_id = fields[0]
                .parse::<u32>()
                .map_err(|e| format!("line {}: {e}", lineno + 2))?;
            let timestamp = parse(fields[1])?;
            let raw = if fields[2].is_empty() {
                None
            } else {
                Some(PoseMeasurement {
                    x: parse(fields[2])?,
                    y: parse(fields[3])?,
                    z: parse(fields[4])?,
                    roll: parse(fields[5])?,
                    pitch: parse(fields[6])?,
                    yaw: parse(fields[7])?,
                    frame_id,
                    inlier_count: 0,
                    mean_inlier_reprojection_error: 0.0,
                })
            };
            let accepted = fields[8] == "1";
            let filtered = if fields[9].is_empty() {
                None
            } else {
                Some([
                    parse(fields[9])?,
                    parse(fields[10])?,
                    parse(fields[11])?,
                    parse(fields[12])?,
                    parse(fields[13])?,
                    parse(fields[14])?,
                ])
            };
            let inliers = fields[15].parse::<usize>().unwrap_or(0);
            let n_corr = fields[16].parse::<usize>().unwrap_or(0);
            let track_count = fields[17].parse::<usize>().unwrap_or(0);
            frames.push(FrameEstimate {
                frame_id,
                timestamp,
                raw,
                accepted,
                filtered,
                inliers,
                n_corr,
                track_count,
            });
        }
        Ok(frames)
    }
}

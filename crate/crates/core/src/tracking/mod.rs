//! Online front-end: frame subdivision for parallel feature extraction,
//! pyramidal Lucas-Kanade tracking, and the tracking-set lifecycle that
//! interleaves cheap per-frame tracking with slower background matching.

mod extract;
mod lk;

pub use extract::{extract_subdivided, FeatureExtractor, RasterExtractor};
pub use lk::{build_pyramid, lk_track, LkConfig, Pyramid};

use nalgebra::Vector2;

/// 8-bit grayscale frame, row-major.
#[derive(Debug, Clone)]
pub struct RasterFrame {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub frame_id: u32,
    pub timestamp: f64,
}

impl RasterFrame {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, frame_id: u32, timestamp: f64) -> Self {
        assert_eq!(pixels.len(), (width * height) as usize);
        Self {
            width,
            height,
            pixels,
            frame_id,
            timestamp,
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }
}

/// Pixel rectangle, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x as f64
            && u < (self.x + self.width) as f64
            && v >= self.y as f64
            && v < (self.y + self.height) as f64
    }
}

/// One segment of a subdivided frame, scheduled for feature extraction.
///
/// `interior` rectangles tile the frame exactly; `expanded` adds the margin
/// (clamped at the frame borders) so detections near segment seams are not
/// lost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractionTask {
    pub frame_id: u32,
    pub interior: Rect,
    pub expanded: Rect,
}

/// Splits a frame into a `grid_x` by `grid_y` tiling of extraction tasks.
/// A 2x4 grid on 640x480 yields eight 320x120 segments.
pub fn subdivide(frame: &RasterFrame, grid_x: u32, grid_y: u32, margin: u32) -> Vec<ExtractionTask> {
    assert!(grid_x >= 1 && grid_y >= 1);
    let mut tasks = Vec::with_capacity((grid_x * grid_y) as usize);
    for gy in 0..grid_y {
        for gx in 0..grid_x {
            let x0 = gx * frame.width / grid_x;
            let x1 = (gx + 1) * frame.width / grid_x;
            let y0 = gy * frame.height / grid_y;
            let y1 = (gy + 1) * frame.height / grid_y;
            let interior = Rect {
                x: x0,
                y: y0,
                width: x1 - x0,
                height: y1 - y0,
            };
            let ex0 = x0.saturating_sub(margin);
            let ey0 = y0.saturating_sub(margin);
            let ex1 = (x1 + margin).min(frame.width);
            let ey1 = (y1 + margin).min(frame.height);
            let expanded = Rect {
                x: ex0,
                y: ey0,
                width: ex1 - ex0,
                height: ey1 - ey0,
            };
            tasks.push(ExtractionTask {
                frame_id: frame.frame_id,
                interior,
                expanded,
            });
        }
    }
    tasks
}

/// A map point currently followed by optical flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedPoint {
    pub point_id: u32,
    pub current_uv: Vector2<f64>,
    /// Frame id at which the point entered the tracking set.
    pub birth_frame: u32,
    pub last_descriptor_distance: f32,
    pub consecutive_failures: u32,
}

/// Per-maintenance counters. `alive_prev - lost + inserted = alive_next`;
/// capacity evictions count as lost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrackingStats {
    pub tracked: usize,
    pub lost: usize,
    pub inserted: usize,
}

/// A freshly matched point handed over from background matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreshMatch {
    pub point_id: u32,
    pub uv: Vector2<f64>,
    pub descriptor_distance: f32,
}

/// The working set of tracked points. Single writer: all mutation happens
/// through [`maintain_tracking_set`] on the serialized frame path.
#[derive(Debug, Clone)]
pub struct TrackingSet {
    pub alive: Vec<TrackedPoint>,
    pub capacity: usize,
    /// Consecutive flow failures tolerated before removal.
    pub failure_limit: u32,
    pub stats: TrackingStats,
}

impl TrackingSet {
    pub fn new(capacity: usize) -> Self {
        Self {
            alive: Vec::new(),
            capacity,
            failure_limit: 1,
            stats: TrackingStats::default(),
        }
    }

    pub fn uvs(&self) -> Vec<Vector2<f64>> {
        self.alive.iter().map(|t| t.current_uv).collect()
    }
}

/// Applies one frame of track results and replenishment to the set.
///
/// `track_results` is parallel to `set.alive` as it was before the call;
/// lost points are removed, fresh matches are inserted (deduplicated by
/// point id, best descriptor distance wins) up to capacity, evicting the
/// longest-tracked points first when full.
pub fn maintain_tracking_set(
    set: &mut TrackingSet,
    track_results: &[Option<Vector2<f64>>],
    fresh_matches: &[FreshMatch],
    frame_id: u32,
) {
    debug_assert!(track_results.is_empty() || track_results.len() == set.alive.len());
    let alive_prev = set.alive.len();
    let mut lost = 0usize;

    if !track_results.is_empty() {
        let mut kept = Vec::with_capacity(set.alive.len());
        for (mut point, result) in set.alive.drain(..).zip(track_results) {
            match result {
                Some(uv) => {
                    point.current_uv = *uv;
                    point.consecutive_failures = 0;
                    kept.push(point);
                }
                None => {
                    point.consecutive_failures += 1;
                    if point.consecutive_failures >= set.failure_limit {
                        lost += 1;
                    } else {
                        kept.push(point);
                    }
                }
            }
        }
        set.alive = kept;
    }
    let tracked = set.alive.len();

    // deduplicate the incoming batch: best descriptor distance per point id
    let mut batch: Vec<FreshMatch> = Vec::with_capacity(fresh_matches.len());
    for m in fresh_matches {
        match batch.iter_mut().find(|b| b.point_id == m.point_id) {
            Some(existing) => {
                if m.descriptor_distance < existing.descriptor_distance {
                    *existing = *m;
                }
            }
            None => batch.push(*m),
        }
    }

    let mut inserted = 0usize;
    for m in batch {
        if let Some(existing) = set.alive.iter_mut().find(|t| t.point_id == m.point_id) {
            // already tracked: refresh the observation, keep the birth frame
            existing.current_uv = m.uv;
            if m.descriptor_distance < existing.last_descriptor_distance {
                existing.last_descriptor_distance = m.descriptor_distance;
            }
            continue;
        }
        if set.alive.len() >= set.capacity {
            // evict the longest-tracked point
            let oldest = set
                .alive
                .iter()
                .enumerate()
                .min_by_key(|(_, t)| (t.birth_frame, t.point_id))
                .map(|(i, _)| i);
            match oldest {
                Some(i) => {
                    set.alive.swap_remove(i);
                    lost += 1;
                }
                None => break,
            }
        }
        set.alive.push(TrackedPoint {
            point_id: m.point_id,
            current_uv: m.uv,
            birth_frame: frame_id,
            last_descriptor_distance: m.descriptor_distance,
            consecutive_failures: 0,
        });
        inserted += 1;
    }

    set.stats = TrackingStats {
        tracked,
        lost,
        inserted,
    };
    debug_assert_eq!(alive_prev - lost + inserted, set.alive.len());
}

/// Decides which frames get full extraction and matching: a frame is
/// dispatched iff no matching job is in flight. Dispatch decisions are
/// recorded so a run can be replayed exactly.
#[derive(Debug, Clone)]
pub struct SamplingScheduler {
    /// Matcher latency in frame-times; 0 models an instantaneous matcher.
    pub latency_frames: usize,
    busy_until: Option<usize>,
    pub dispatch_log: Vec<usize>,
}

impl SamplingScheduler {
    pub fn new(latency_frames: usize) -> Self {
        Self {
            latency_frames,
            busy_until: None,
            dispatch_log: Vec::new(),
        }
    }

    pub fn is_busy(&self, frame_index: usize) -> bool {
        matches!(self.busy_until, Some(until) if frame_index < until)
    }

    /// Returns true when `frame_index` should be dispatched; `force` ignores
    /// the busy flag (used while localization is lost).
    pub fn should_dispatch(&mut self, frame_index: usize, force: bool) -> bool {
        if !force && self.is_busy(frame_index) {
            return false;
        }
        self.busy_until = Some(frame_index + self.latency_frames);
        self.dispatch_log.push(frame_index);
        true
    }
}

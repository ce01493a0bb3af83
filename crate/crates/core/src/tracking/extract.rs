//! Raster feature extraction: Shi-Tomasi corners with a 16x16
//! gradient-orientation-histogram patch descriptor (4x4 cells x 8
//! orientation bins = 128 dimensions).

use rayon::prelude::*;

use crate::descriptors::Descriptor;
use crate::geometry::Keypoint;

use super::{subdivide, ExtractionTask, RasterFrame, Rect};

/// Contract for keypoint/descriptor computation over a frame segment.
/// Implementations must behave identically whether they see the whole frame
/// or an expanded segment, provided the margin covers `detector_radius`.
pub trait FeatureExtractor: Sync {
    fn extract_rect(&self, frame: &RasterFrame, task: &ExtractionTask) -> (Vec<Keypoint>, Vec<Descriptor>);

    /// Margin (pixels) needed so segment extraction equals whole-frame
    /// extraction near seams.
    fn detector_radius(&self) -> u32;

    fn extract(&self, frame: &RasterFrame) -> (Vec<Keypoint>, Vec<Descriptor>) {
        let task = ExtractionTask {
            frame_id: frame.frame_id,
            interior: Rect { x: 0, y: 0, width: frame.width, height: frame.height },
            expanded: Rect { x: 0, y: 0, width: frame.width, height: frame.height },
        };
        self.extract_rect(frame, &task)
    }
}

/// Runs the extractor over a subdivided frame, segments in parallel, and
/// merges the results deterministically (segment order), suppressing
/// duplicate detections within 1 px across overlapping margins.
pub fn extract_subdivided<E: FeatureExtractor>(
    extractor: &E,
    frame: &RasterFrame,
    grid_x: u32,
    grid_y: u32,
) -> (Vec<Keypoint>, Vec<Descriptor>) {
    let tasks = subdivide(frame, grid_x, grid_y, extractor.detector_radius());
    let per_segment: Vec<(Vec<Keypoint>, Vec<Descriptor>)> = tasks
        .par_iter()
        .map(|task| extractor.extract_rect(frame, task))
        .collect();

    let mut keypoints = Vec::new();
    let mut descriptors = Vec::new();
    for (kps, descs) in per_segment {
        for (kp, d) in kps.into_iter().zip(descs) {
            let duplicate = keypoints.iter().position(|existing: &Keypoint| {
                (existing.u - kp.u).abs() <= 1.0 && (existing.v - kp.v).abs() <= 1.0
            });
            match duplicate {
                Some(i) if keypoints[i].response < kp.response => {
                    keypoints[i] = kp;
                    descriptors[i] = d;
                }
                Some(_) => {}
                None => {
                    keypoints.push(kp);
                    descriptors.push(d);
                }
            }
        }
    }
    (keypoints, descriptors)
}

/// Shi-Tomasi corner detector with an upright SIFT-like patch descriptor.
#[derive(Debug, Clone, Copy)]
pub struct RasterExtractor {
    /// Absolute minimum-eigenvalue response threshold (intensities in 0..1).
    /// Absolute (not relative to the segment maximum) so that subdivided
    /// extraction equals whole-frame extraction.
    pub quality_threshold: f32,
    /// Non-maximum suppression radius, pixels.
    pub nms_radius: u32,
}

impl Default for RasterExtractor {
    fn default() -> Self {
        Self {
            quality_threshold: 5e-4,
            nms_radius: 2,
        }
    }
}

/// Half-size of the descriptor sampling patch.
const PATCH_RADIUS: i64 = 8;
const CELL_SIZE: usize = 4;
const ORIENTATION_BINS: usize = 8;

impl FeatureExtractor for RasterExtractor {
    fn detector_radius(&self) -> u32 {
        // descriptor patch + gradient support + NMS neighborhood
        (PATCH_RADIUS as u32 + 2).max(self.nms_radius + 3) + 2
    }

    fn extract_rect(&self, frame: &RasterFrame, task: &ExtractionTask) -> (Vec<Keypoint>, Vec<Descriptor>) {
        let rect = task.expanded;
        let w = rect.width as usize;
        let h = rect.height as usize;
        if w < 8 || h < 8 {
            return (Vec::new(), Vec::new());
        }

        // intensity patch as f32 in 0..1
        let mut img = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                img[y * w + x] = frame.get(rect.x + x as u32, rect.y + y as u32) as f32 / 255.0;
            }
        }

        // central-difference gradients
        let mut gx = vec![0.0f32; w * h];
        let mut gy = vec![0.0f32; w * h];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                gx[y * w + x] = (img[y * w + x + 1] - img[y * w + x - 1]) * 0.5;
                gy[y * w + x] = (img[(y + 1) * w + x] - img[(y - 1) * w + x]) * 0.5;
            }
        }

        // min-eigenvalue response over a 3x3 structure tensor window
        let mut response = vec![0.0f32; w * h];
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                let (mut sxx, mut sxy, mut syy) = (0.0f32, 0.0f32, 0.0f32);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let i = ((y as i64 + dy) * w as i64 + x as i64 + dx) as usize;
                        sxx += gx[i] * gx[i];
                        sxy += gx[i] * gy[i];
                        syy += gy[i] * gy[i];
                    }
                }
                let trace = sxx + syy;
                let det = sxx * syy - sxy * sxy;
                let disc = (trace * trace * 0.25 - det).max(0.0).sqrt();
                response[y * w + x] = (trace * 0.5 - disc) / 9.0;
            }
        }

        // threshold + non-maximum suppression; ties resolved towards the
        // earlier pixel in scan order so results stay deterministic
        let r = self.nms_radius as i64;
        let mut keypoints = Vec::new();
        let mut descriptors = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = response[y * w + x];
                if v < self.quality_threshold {
                    continue;
                }
                let mut is_max = true;
                'nms: for dy in -r..=r {
                    for dx in -r..=r {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = x as i64 + dx;
                        let ny = y as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let n = response[ny as usize * w + nx as usize];
                        let before = dy < 0 || (dy == 0 && dx < 0);
                        if n > v || (before && n == v) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if !is_max {
                    continue;
                }

                // sub-pixel refinement by separable quadratic fit
                let refine = |m1: f32, c: f32, p1: f32| -> f64 {
                    let denom = m1 - 2.0 * c + p1;
                    if denom.abs() < 1e-12 {
                        0.0
                    } else {
                        (0.5 * (m1 - p1) / denom).clamp(-0.5, 0.5) as f64
                    }
                };
                let du = if x > 0 && x < w - 1 {
                    refine(response[y * w + x - 1], v, response[y * w + x + 1])
                } else {
                    0.0
                };
                let dv = if y > 0 && y < h - 1 {
                    refine(response[(y - 1) * w + x], v, response[(y + 1) * w + x])
                } else {
                    0.0
                };

                let u_frame = rect.x as f64 + x as f64 + du;
                let v_frame = rect.y as f64 + y as f64 + dv;
                // only keep detections in the interior tile; the margin
                // exists so border responses match whole-frame extraction
                if !task.interior.contains(u_frame, v_frame) {
                    continue;
                }
                // the descriptor patch must fit inside the frame
                let pr = (PATCH_RADIUS + 2) as f64;
                if u_frame < pr
                    || v_frame < pr
                    || u_frame >= frame.width as f64 - pr
                    || v_frame >= frame.height as f64 - pr
                {
                    continue;
                }
                if let Some(descriptor) = patch_descriptor(frame, u_frame, v_frame) {
                    keypoints.push(Keypoint::new(u_frame, v_frame, frame.frame_id, v as f64));
                    descriptors.push(descriptor);
                }
            }
        }
        (keypoints, descriptors)
    }
}

/// Upright 4x4-cell, 8-bin gradient orientation histogram over a 16x16
/// patch, Gaussian-weighted, SIFT-style clamped at 0.2 and renormalized.
fn patch_descriptor(frame: &RasterFrame, u: f64, v: f64) -> Option<Descriptor> {
    let mut hist = vec![0.0f32; CELL_SIZE * CELL_SIZE * ORIENTATION_BINS];
    let sample = |x: f64, y: f64| -> f32 {
        let xi = x.clamp(0.0, (frame.width - 1) as f64);
        let yi = y.clamp(0.0, (frame.height - 1) as f64);
        let x0 = xi.floor() as u32;
        let y0 = yi.floor() as u32;
        let x1 = (x0 + 1).min(frame.width - 1);
        let y1 = (y0 + 1).min(frame.height - 1);
        let fx = (xi - x0 as f64) as f32;
        let fy = (yi - y0 as f64) as f32;
        let top = frame.get(x0, y0) as f32 * (1.0 - fx) + frame.get(x1, y0) as f32 * fx;
        let bot = frame.get(x0, y1) as f32 * (1.0 - fx) + frame.get(x1, y1) as f32 * fx;
        (top * (1.0 - fy) + bot * fy) / 255.0
    };

    let sigma = PATCH_RADIUS as f32 * 0.5;
    for py in 0..(2 * PATCH_RADIUS) {
        for px in 0..(2 * PATCH_RADIUS) {
            let ox = px as f64 - PATCH_RADIUS as f64 + 0.5;
            let oy = py as f64 - PATCH_RADIUS as f64 + 0.5;
            let x = u + ox;
            let y = v + oy;
            let dx = sample(x + 1.0, y) - sample(x - 1.0, y);
            let dy = sample(x, y + 1.0) - sample(x, y - 1.0);
            let mag = (dx * dx + dy * dy).sqrt();
            if mag <= 0.0 {
                continue;
            }
            let weight = (-((ox * ox + oy * oy) as f32) / (2.0 * sigma * sigma)).exp();
            let angle = (dy as f64).atan2(dx as f64); // (-pi, pi]
            let bin_pos = (angle + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)
                * ORIENTATION_BINS as f64;
            let bin0 = bin_pos.floor() as usize % ORIENTATION_BINS;
            let bin1 = (bin0 + 1) % ORIENTATION_BINS;
            let frac = (bin_pos - bin_pos.floor()) as f32;

            let cell_x = (px as usize) / CELL_SIZE;
            let cell_y = (py as usize) / CELL_SIZE;
            let base = (cell_y * CELL_SIZE + cell_x) * ORIENTATION_BINS;
            hist[base + bin0] += mag * weight * (1.0 - frac);
            hist[base + bin1] += mag * weight * frac;
        }
    }

    let norm: f32 = hist.iter().map(|&h| h * h).sum::<f32>().sqrt();
    if norm <= 1e-12 {
        return None;
    }
    for h in hist.iter_mut() {
        *h = (*h / norm).min(0.2);
    }
    Descriptor::new(hist).ok()
}

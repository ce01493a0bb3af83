//! Pyramidal Lucas-Kanade optical flow with forward-backward verification.

use nalgebra::{Matrix2, Vector2};

use super::RasterFrame;

/// Flow parameters. The defaults (3 levels, 21x21 window, 30 iterations,
/// 0.01 px convergence, 1 px forward-backward bound) follow standard
/// practice.
#[derive(Debug, Clone, Copy)]
pub struct LkConfig {
    pub levels: usize,
    /// Half window size; 10 gives the 21x21 integration window.
    pub window_radius: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the per-iteration update, pixels.
    pub epsilon: f64,
    /// Forward-backward verification bound, pixels.
    pub fb_threshold: f64,
    /// Minimum normalized eigenvalue of the gradient matrix.
    pub min_eigenvalue: f64,
}

impl Default for LkConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            window_radius: 10,
            max_iterations: 30,
            epsilon: 0.01,
            fb_threshold: 1.0,
            min_eigenvalue: 1e-4,
        }
    }
}

/// Grayscale image as f32 with bilinear sampling.
#[derive(Debug, Clone)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    fn from_frame(frame: &RasterFrame) -> Self {
        Self {
            width: frame.width as usize,
            height: frame.height as usize,
            data: frame.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with border clamp.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (xc - x0 as f64) as f32;
        let fy = (yc - y0 as f64) as f32;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Central-difference gradient at a sub-pixel location.
    #[inline]
    fn gradient(&self, x: f64, y: f64) -> (f32, f32) {
        let gx = (self.sample(x + 1.0, y) - self.sample(x - 1.0, y)) * 0.5;
        let gy = (self.sample(x, y + 1.0) - self.sample(x, y - 1.0)) * 0.5;
        (gx, gy)
    }

    fn downsample(&self) -> GrayImage {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut data = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                // 3x3 binomial blur sampled at even pixels
                let mut acc = 0.0f32;
                let mut weight = 0.0f32;
                for (dy, wy) in [(-1i64, 1.0f32), (0, 2.0), (1, 1.0)] {
                    for (dx, wx) in [(-1i64, 1.0f32), (0, 2.0), (1, 1.0)] {
                        let sx = (2 * x as i64 + dx).clamp(0, self.width as i64 - 1) as usize;
                        let sy = (2 * y as i64 + dy).clamp(0, self.height as i64 - 1) as usize;
                        acc += self.at(sx, sy) * wx * wy;
                        weight += wx * wy;
                    }
                }
                data[y * w + x] = acc / weight;
            }
        }
        GrayImage {
            width: w,
            height: h,
            data,
        }
    }
}

/// Image pyramid, level 0 at full resolution.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<GrayImage>,
}

pub fn build_pyramid(frame: &RasterFrame, levels: usize) -> Pyramid {
    let mut out = vec![GrayImage::from_frame(frame)];
    for _ in 1..levels {
        let next = out.last().unwrap().downsample();
        if next.width < 16 || next.height < 16 {
            break;
        }
        out.push(next);
    }
    Pyramid { levels: out }
}

/// Tracks `points` from `prev` to `next`. Each result is the new position,
/// or `None` when tracking failed: gradient too weak, the point left the
/// image, or the backward track landed more than `fb_threshold` pixels from
/// the origin.
pub fn lk_track(
    prev: &RasterFrame,
    next: &RasterFrame,
    points: &[Vector2<f64>],
    config: &LkConfig,
) -> Vec<Option<Vector2<f64>>> {
    assert_eq!(prev.width, next.width);
    assert_eq!(prev.height, next.height);
    let prev_pyr = build_pyramid(prev, config.levels);
    let next_pyr = build_pyramid(next, config.levels);
    lk_track_pyramids(&prev_pyr, &next_pyr, points, config)
}

/// Pyramid-level entry point so callers can reuse pyramids across points.
pub fn lk_track_pyramids(
    prev: &Pyramid,
    next: &Pyramid,
    points: &[Vector2<f64>],
    config: &LkConfig,
) -> Vec<Option<Vector2<f64>>> {
    points
        .iter()
        .map(|&p| {
            let forward = track_single(prev, next, p, config)?;
            let backward = track_single(next, prev, forward, config)?;
            if (backward - p).norm() > config.fb_threshold {
                return None;
            }
            Some(forward)
        })
        .collect()
}

fn track_single(
    prev: &Pyramid,
    next: &Pyramid,
    point: Vector2<f64>,
    config: &LkConfig,
) -> Option<Vector2<f64>> {
    let levels = prev.levels.len().min(next.levels.len());
    let mut flow = Vector2::new(0.0, 0.0);
    for level in (0..levels).rev() {
        let scale = (1usize << level) as f64;
        let p = point / scale;
        flow *= if level == levels - 1 { 0.0 } else { 2.0 };
        flow = track_level(&prev.levels[level], &next.levels[level], p, flow, config)?;
    }
    let result = point + flow;
    let (w, h) = (prev.levels[0].width as f64, prev.levels[0].height as f64);
    if result.x < 0.0 || result.y < 0.0 || result.x >= w || result.y >= h {
        return None;
    }
    Some(result)
}

/// Classic KLT iteration at one pyramid level: gradients from the template
/// image, iterative updates against the target image.
fn track_level(
    template: &GrayImage,
    target: &GrayImage,
    point: Vector2<f64>,
    initial_flow: Vector2<f64>,
    config: &LkConfig,
) -> Option<Vector2<f64>> {
    let r = config.window_radius as i64;
    let count = ((2 * r + 1) * (2 * r + 1)) as f64;

    // precompute template values and gradients over the window
    let mut values = Vec::with_capacity(count as usize);
    let mut grads = Vec::with_capacity(count as usize);
    let mut g = Matrix2::<f64>::zeros();
    for dy in -r..=r {
        for dx in -r..=r {
            let x = point.x + dx as f64;
            let y = point.y + dy as f64;
            let v = template.sample(x, y);
            let (gx, gy) = template.gradient(x, y);
            values.push(v);
            grads.push((gx as f64, gy as f64));
            g[(0, 0)] += gx as f64 * gx as f64;
            g[(0, 1)] += gx as f64 * gy as f64;
            g[(1, 0)] += gx as f64 * gy as f64;
            g[(1, 1)] += gy as f64 * gy as f64;
        }
    }
    // eigenvalue floor on the normalized gradient matrix
    let trace = g[(0, 0)] + g[(1, 1)];
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    let disc = (trace * trace / 4.0 - det).max(0.0).sqrt();
    let min_eig = (trace / 2.0 - disc) / count;
    if min_eig < config.min_eigenvalue {
        return None;
    }
    let g_inv = g.try_inverse()?;

    let mut flow = initial_flow;
    for _ in 0..config.max_iterations {
        let mut b = Vector2::<f64>::zeros();
        let mut idx = 0usize;
        for dy in -r..=r {
            for dx in -r..=r {
                let tx = point.x + flow.x + dx as f64;
                let ty = point.y + flow.y + dy as f64;
                let diff = values[idx] as f64 - target.sample(tx, ty) as f64;
                let (gx, gy) = grads[idx];
                b.x += diff * gx;
                b.y += diff * gy;
                idx += 1;
            }
        }
        let delta = g_inv * b;
        flow += delta;
        if delta.norm() < config.epsilon {
            break;
        }
    }

    let lw = template.width as f64;
    let lh = template.height as f64;
    let tracked = point + flow;
    if tracked.x < -1.0 || tracked.y < -1.0 || tracked.x > lw || tracked.y > lh {
        return None;
    }
    Some(flow)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Smooth random texture: white noise blurred a few times.
    pub(crate) fn textured_frame(width: u32, height: u32, seed: u64, frame_id: u32) -> RasterFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut field: Vec<f32> = (0..(width * height) as usize)
            .map(|_| rng.gen_range(0.0..255.0))
            .collect();
        for _ in 0..3 {
            let mut next = field.clone();
            for y in 1..(height as usize - 1) {
                for x in 1..(width as usize - 1) {
                    let idx = y * width as usize + x;
                    next[idx] = (field[idx] * 4.0
                        + field[idx - 1]
                        + field[idx + 1]
                        + field[idx - width as usize]
                        + field[idx + width as usize])
                        / 8.0;
                }
            }
            field = next;
        }
        let pixels = field.iter().map(|&v| v.clamp(0.0, 255.0) as u8).collect();
        RasterFrame::new(width, height, pixels, frame_id, frame_id as f64 / 30.0)
    }

    /// Resample a frame through an affine map (target <- source coords).
    pub(crate) fn warp_affine(frame: &RasterFrame, m: [f64; 6], frame_id: u32) -> RasterFrame {
        let img = GrayImage::from_frame(frame);
        let mut pixels = vec![0u8; frame.pixels.len()];
        for y in 0..frame.height as usize {
            for x in 0..frame.width as usize {
                // inverse map: source position for this target pixel
                let sx = m[0] * x as f64 + m[1] * y as f64 + m[2];
                let sy = m[3] * x as f64 + m[4] * y as f64 + m[5];
                pixels[y * frame.width as usize + x] =
                    (img.sample(sx, sy) * 255.0).clamp(0.0, 255.0) as u8;
            }
        }
        RasterFrame::new(frame.width, frame.height, pixels, frame_id, frame_id as f64 / 30.0)
    }

    fn interior_grid(width: u32, height: u32, step: u32) -> Vec<Vector2<f64>> {
        let mut pts = Vec::new();
        let mut y = 40;
        while y < height - 40 {
            let mut x = 40;
            while x < width - 40 {
                pts.push(Vector2::new(x as f64, y as f64));
                x += step;
            }
            y += step;
        }
        pts
    }

    #[test]
    fn identical_frames_zero_displacement() {
        let f = textured_frame(320, 240, 70, 0);
        let points = interior_grid(320, 240, 40);
        let results = lk_track(&f, &f, &points, &LkConfig::default());
        for (p, r) in points.iter().zip(&results) {
            let q = r.expect("tracked on identical frames");
            assert!((q - p).norm() < 1e-3, "drift {}", (q - p).norm());
        }
    }

    #[test]
    fn pure_translation_recovered() {
        let f = textured_frame(320, 240, 71, 0);
        // target pixel (x,y) samples source (x-3, y): content shifts right by 3
        let shifted = warp_affine(&f, [1.0, 0.0, -3.0, 0.0, 1.0, 0.0], 1);
        let points = interior_grid(320, 240, 30);
        let results = lk_track(&f, &shifted, &points, &LkConfig::default());
        let mut tracked = 0;
        for (p, r) in points.iter().zip(&results) {
            if let Some(q) = r {
                let d = q - p;
                assert!(
                    (d.x - 3.0).abs() < 0.25 && d.y.abs() < 0.25,
                    "displacement {:?}",
                    d
                );
                tracked += 1;
            }
        }
        assert!(tracked as f64 >= points.len() as f64 * 0.9);
    }

    /// Oracle = the analytic affine warp.
    #[test]
    fn small_affine_warp_tracked_within_half_pixel() {
        let f = textured_frame(320, 240, 72, 0);
        // forward map: slight rotation + scale + shift around the origin
        let (ca, sa) = (0.01f64.cos(), 0.01f64.sin());
        let s = 1.005;
        let forward = [s * ca, -s * sa, 2.0, s * sa, s * ca, -1.0];
        // warp_affine wants the inverse (source for target pixel)
        let det = forward[0] * forward[4] - forward[1] * forward[3];
        let inv = [
            forward[4] / det,
            -forward[1] / det,
            (forward[1] * forward[5] - forward[4] * forward[2]) / det,
            -forward[3] / det,
            forward[0] / det,
            (forward[3] * forward[2] - forward[0] * forward[5]) / det,
        ];
        let warped = warp_affine(&f, inv, 1);

        let points = interior_grid(320, 240, 25);
        let results = lk_track(&f, &warped, &points, &LkConfig::default());
        let mut good = 0;
        let mut total = 0;
        for (p, r) in points.iter().zip(&results) {
            let expected = Vector2::new(
                forward[0] * p.x + forward[1] * p.y + forward[2],
                forward[3] * p.x + forward[4] * p.y + forward[5],
            );
            if expected.x < 20.0 || expected.y < 20.0 || expected.x > 300.0 || expected.y > 220.0 {
                continue;
            }
            total += 1;
            if let Some(q) = r {
                if (q - expected).norm() < 0.5 {
                    good += 1;
                }
            }
        }
        assert!(
            good as f64 >= total as f64 * 0.9,
            "only {good} of {total} tracked within 0.5 px"
        );
    }

    #[test]
    fn forward_backward_consistency_definitional() {
        let f = textured_frame(320, 240, 73, 0);
        let shifted = warp_affine(&f, [1.0, 0.0, -2.0, 0.0, 1.0, 1.0], 1);
        let points = interior_grid(320, 240, 35);
        let config = LkConfig::default();
        let results = lk_track(&f, &shifted, &points, &config);
        // every surviving track must satisfy the backward bound by definition
        for (p, r) in points.iter().zip(&results) {
            if let Some(q) = r {
                let back = lk_track(&shifted, &f, &[*q], &config)[0];
                let b = back.expect("backward track exists for surviving forward track");
                assert!((b - p).norm() <= config.fb_threshold + 1e-9);
            }
        }
    }
}

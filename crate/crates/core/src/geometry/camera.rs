use nalgebra::{Point3, Vector2, Vector3};

/// Calibrated pinhole camera without lens distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal length along u, in pixels.
    pub fx: f64,
    /// Focal length along v, in pixels.
    pub fy: f64,
    /// Principal point column, in pixels.
    pub cx: f64,
    /// Principal point row, in pixels.
    pub cy: f64,
    /// Image width in pixels.
    pub width: u32,
    /// Image height in pixels.
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        debug_assert!(fx > 0.0 && fy > 0.0);
        debug_assert!(cx >= 0.0 && cx < width as f64);
        debug_assert!(cy >= 0.0 && cy < height as f64);
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Pinhole projection of a camera-frame point with positive depth.
    pub fn project_camera_point(&self, cam: &Point3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * cam.x / cam.z + self.cx,
            self.fy * cam.y / cam.z + self.cy,
        )
    }

    /// Camera-frame ray through pixel `(u, v)` with unit depth (z = 1).
    pub fn unproject_pixel(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy, 1.0)
    }

    /// Unit-norm bearing vector through pixel `(u, v)`.
    pub fn bearing(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        self.unproject_pixel(uv).normalize()
    }

    /// True when `(u, v)` lies inside the image rectangle.
    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.x < self.width as f64 && uv.y >= 0.0 && uv.y < self.height as f64
    }
}

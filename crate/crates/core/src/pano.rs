//! Panorama splitting: cuts an equirectangular panorama into a ring of
//! undistorted (rectilinear) pinhole views.
//!
//! World frame: x = east, y = north, z = up. Headings are compass degrees
//! (clockwise from north), so a heading `h` points along `(sin h, cos h)`.
//! A split into `n` views assigns view `k` the heading range
//! `[k*360/n, (k+1)*360/n)` with its optical axis on the range's bisector.

use crate::error::{Error, Result};
use crate::img::{focal_px, EquirectImage, PinholeView, PixelGrid};

/// View counts the splitter accepts (each divides 360° evenly).
pub const SUPPORTED_VIEW_COUNTS: [usize; 4] = [3, 4, 6, 9];

/// Rectilinear camera with a horizontal optical axis at a fixed heading.
///
/// Pixel coordinates are continuous with integer values at pixel centers;
/// the principal point sits at the image center `((w-1)/2, (h-1)/2)`.
#[derive(Debug, Clone, Copy)]
pub struct ViewCamera {
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    /// Heading of the optical axis in degrees.
    pub axis_heading_deg: f64,
}

impl ViewCamera {
    pub fn new(width: usize, height: usize, fov_deg: f64, axis_heading_deg: f64) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Config(format!(
                "pinhole views need at least 2x2 pixels, got {width}x{height}"
            )));
        }
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::Config(format!(
                "rectilinear field of view must lie in (0, 180) degrees, got {fov_deg}"
            )));
        }
        Ok(Self { width, height, focal_px: focal_px(width, fov_deg), axis_heading_deg })
    }

    #[inline]
    fn principal_point(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    #[inline]
    fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let h = self.axis_heading_deg.to_radians();
        let forward = [h.sin(), h.cos(), 0.0];
        let right = [h.cos(), -h.sin(), 0.0];
        let down = [0.0, 0.0, -1.0];
        (forward, right, down)
    }

    /// World (heading, elevation) in degrees seen by a view pixel.
    pub fn pixel_to_direction(&self, px: f64, py: f64) -> (f64, f64) {
        let (cx, cy) = self.principal_point();
        let (forward, right, down) = self.basis();
        let u = (px - cx) / self.focal_px;
        let v = (py - cy) / self.focal_px;
        let d = [
            forward[0] + u * right[0] + v * down[0],
            forward[1] + u * right[1] + v * down[1],
            forward[2] + u * right[2] + v * down[2],
        ];
        let heading = d[0].atan2(d[1]).to_degrees();
        let elevation = d[2].atan2(d[0].hypot(d[1])).to_degrees();
        (heading, elevation)
    }

    /// Continuous view pixel seeing the given direction, or `None` when the
    /// direction lies on or behind the camera plane.
    pub fn direction_to_pixel(&self, heading_deg: f64, elevation_deg: f64) -> Option<(f64, f64)> {
        let (lam, phi) = (heading_deg.to_radians(), elevation_deg.to_radians());
        let d = [phi.cos() * lam.sin(), phi.cos() * lam.cos(), phi.sin()];
        self.point_to_pixel(d)
    }

    /// Projects a point given in camera-centered world coordinates (meters or
    /// any consistent unit). Returns `None` on or behind the camera plane.
    pub fn point_to_pixel(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let (forward, right, down) = self.basis();
        let z = p[0] * forward[0] + p[1] * forward[1] + p[2] * forward[2];
        if z <= 1e-12 {
            return None;
        }
        let x = p[0] * right[0] + p[1] * right[1] + p[2] * right[2];
        let y = p[0] * down[0] + p[1] * down[1] + p[2] * down[2];
        let (cx, cy) = self.principal_point();
        Some((cx + self.focal_px * x / z, cy + self.focal_px * y / z))
    }
}

/// Splits a panorama into `n_views` pinhole views of `out_width x out_height`
/// pixels each. View `k` spans headings `[k*fov, (k+1)*fov)` with
/// `fov = 360/n_views`; supported counts are 3, 4, 6 and 9.
pub fn pano_to_views(
    pano: &EquirectImage,
    n_views: usize,
    out_width: usize,
    out_height: usize,
) -> Result<Vec<PinholeView>> {
    if !SUPPORTED_VIEW_COUNTS.contains(&n_views) {
        return Err(Error::Config(format!(
            "unsupported view count {n_views}; expected one of {SUPPORTED_VIEW_COUNTS:?}"
        )));
    }
    let fov = 360.0 / n_views as f64;
    let channels = pano.pixels.channels;

    let mut views = Vec::with_capacity(n_views);
    for k in 0..n_views {
        let yaw = k as f64 * fov;
        let cam = ViewCamera::new(out_width, out_height, fov, yaw + fov / 2.0)?;
        let mut grid = PixelGrid::zeros(out_width, out_height, channels);
        let mut sample = vec![0.0; channels];
        for py in 0..out_height {
            for px in 0..out_width {
                let (heading, elevation) = cam.pixel_to_direction(px as f64, py as f64);
                pano.sample_direction(heading, elevation, &mut sample);
                for (c, &v) in sample.iter().enumerate() {
                    grid.set(px, py, c, v);
                }
            }
        }
        views.push(PinholeView::new(grid, fov, yaw)?);
    }
    Ok(views)
}

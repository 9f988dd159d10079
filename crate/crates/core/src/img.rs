//! Image containers and portable-pixmap I/O.
//!
//! All pixel values are stored as `f64` in `[0, 1]`, interleaved row-major
//! (`(y * width + x) * channels + c`). Files use the binary PNM formats
//! (`P5` grayscale / `P6` RGB) with a one-line text header; `maxval` 255
//! selects 8-bit samples and 65535 selects 16-bit big-endian samples.

use crate::error::{Error, Result};
use std::path::Path;

/// Planar size plus interleaved samples; the storage shared by every image type.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Input("pixel grid dimensions must be positive".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Input(format!(
                "pixel buffer holds {} samples, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    #[inline]
    pub fn sample_index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.sample_index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.sample_index(x, y, c);
        self.data[i] = v;
    }

    /// True when every sample is finite and inside `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Bilinear sample at continuous pixel coordinates, one output per channel.
    ///
    /// `x` wraps modulo the width when `wrap_x` is set (panoramas are
    /// horizontally periodic); otherwise it clamps like `y` does.
    pub fn sample_bilinear(&self, x: f64, y: f64, wrap_x: bool, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        let w = self.width as isize;
        let h = self.height as isize;

        let y = y.clamp(0.0, (self.height - 1) as f64);
        let y0 = y.floor();
        let fy = y - y0;
        let y0 = y0 as isize;
        let y1 = (y0 + 1).min(h - 1);

        let (x0, x1, fx) = if wrap_x {
            let x = x.rem_euclid(self.width as f64);
            let x0f = x.floor();
            let fx = x - x0f;
            let x0 = (x0f as isize).rem_euclid(w);
            ((x0) as usize, ((x0 + 1).rem_euclid(w)) as usize, fx)
        } else {
            let x = x.clamp(0.0, (self.width - 1) as f64);
            let x0f = x.floor();
            let fx = x - x0f;
            let x0 = x0f as isize;
            let x1 = (x0 + 1).min(w - 1);
            (x0 as usize, x1 as usize, fx)
        };
        let (y0, y1) = (y0 as usize, y1 as usize);

        for c in 0..self.channels {
            let v00 = self.get(x0, y0, c);
            let v10 = self.get(x1, y0, c);
            let v01 = self.get(x0, y1, c);
            let v11 = self.get(x1, y1, c);
            out[c] = v00 * (1.0 - fx) * (1.0 - fy)
                + v10 * fx * (1.0 - fy)
                + v01 * (1.0 - fx) * fy
                + v11 * fx * fy;
        }
    }
}

/// Full 360°x180° panorama.
///
/// Convention: column 0 sits at heading -180° and headings increase eastward
/// left-to-right (column `x` is at `-180 + x * 360 / width` degrees); row 0
/// sits at +90° elevation. Heading wraps, elevation clamps at the poles.
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectImage {
    pub pixels: PixelGrid,
}

impl EquirectImage {
    pub fn new(pixels: PixelGrid) -> Result<Self> {
        if pixels.width != 2 * pixels.height {
            return Err(Error::Input(format!(
                "equirectangular image must be 2:1, got {}x{}",
                pixels.width, pixels.height
            )));
        }
        if !pixels.is_normalized() {
            return Err(Error::Input("panorama samples must be finite and in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    /// Continuous pixel coordinates of a (heading, elevation) direction in degrees.
    #[inline]
    pub fn direction_to_pixel(&self, heading_deg: f64, elevation_deg: f64) -> (f64, f64) {
        let x = (heading_deg + 180.0) * self.pixels.width as f64 / 360.0;
        let y = (90.0 - elevation_deg) * self.pixels.height as f64 / 180.0;
        (x, y)
    }

    /// (heading, elevation) in degrees of a continuous pixel coordinate.
    #[inline]
    pub fn pixel_to_direction(&self, x: f64, y: f64) -> (f64, f64) {
        let heading = -180.0 + x * 360.0 / self.pixels.width as f64;
        let elevation = 90.0 - y * 180.0 / self.pixels.height as f64;
        (heading, elevation)
    }

    /// Bilinear sample along a view direction; heading wraps, elevation clamps.
    pub fn sample_direction(&self, heading_deg: f64, elevation_deg: f64, out: &mut [f64]) {
        let (x, y) = self.direction_to_pixel(heading_deg, elevation_deg);
        self.pixels.sample_bilinear(x, y, true, out);
    }
}

/// Undistorted pinhole view cut from a panorama.
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeView {
    pub pixels: PixelGrid,
    /// Horizontal field of view in degrees, in (0, 180).
    pub fov_deg: f64,
    /// Heading of the view's left edge relative to the panorama's reference
    /// heading, in `[0, 360)`. The optical axis sits at `yaw_offset + fov/2`.
    pub yaw_offset_deg: f64,
}

impl PinholeView {
    pub fn new(pixels: PixelGrid, fov_deg: f64, yaw_offset_deg: f64) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::Config(format!(
                "pinhole field of view must lie in (0, 180) degrees, got {fov_deg}"
            )));
        }
        if !pixels.is_normalized() {
            return Err(Error::Input("view samples must be finite and in [0, 1]".into()));
        }
        Ok(Self { pixels, fov_deg, yaw_offset_deg: crate::util::wrap_deg_0_360(yaw_offset_deg) })
    }

    /// Focal length in pixels implied by the horizontal field of view.
    #[inline]
    pub fn focal_px(&self) -> f64 {
        focal_px(self.pixels.width, self.fov_deg)
    }
}

/// Focal length in pixels for a view of `width` pixels spanning `fov_deg`.
#[inline]
pub fn focal_px(width: usize, fov_deg: f64) -> f64 {
    (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan()
}

// ── portable pixmap I/O ─────────────────────────────────────────────────────

/// Decodes a binary PNM image (`P5` grayscale or `P6` RGB, 8- or 16-bit).
pub fn decode_pnm(bytes: &[u8]) -> Result<PixelGrid> {
    let mut pos = 0usize;

    fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        if *pos >= bytes.len() {
            return Err(Error::Format("unexpected end of pixmap header".into()));
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    }

    let magic = token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported pixmap magic `{other}`"))),
    };
    let parse_dim = |t: String| -> Result<usize> {
        t.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad pixmap header field `{t}`")))
    };
    let width = parse_dim(token(bytes, &mut pos)?)?;
    let height = parse_dim(token(bytes, &mut pos)?)?;
    let maxval = parse_dim(token(bytes, &mut pos)?)?;
    if width == 0 || height == 0 {
        return Err(Error::Format("pixmap dimensions must be positive".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("pixmap maxval {maxval} out of range [1, 65535]")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing separator before pixmap payload".into()));
    }
    pos += 1;

    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let n = width * height * channels;
    let need = n * bytes_per_sample;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "pixmap payload holds {} bytes, expected {need}",
            payload.len()
        )));
    }

    let scale = 1.0 / maxval as f64;
    let mut data = Vec::with_capacity(n);
    if bytes_per_sample == 1 {
        for &b in &payload[..n] {
            data.push(b as f64 * scale);
        }
    } else {
        for i in 0..n {
            let hi = payload[2 * i] as u16;
            let lo = payload[2 * i + 1] as u16;
            data.push(((hi << 8) | lo) as f64 * scale);
        }
    }
    PixelGrid::new(width, height, channels, data)
}

/// Encodes a 1- or 3-channel grid as binary PNM. `deep` selects 16-bit samples.
pub fn encode_pnm(grid: &PixelGrid, deep: bool) -> Result<Vec<u8>> {
    let magic = match grid.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Input(format!(
                "pixmaps hold 1 or 3 channels, image has {c}"
            )))
        }
    };
    let maxval: u32 = if deep { 65535 } else { 255 };
    let mut out = format!("{magic} {} {} {maxval}\n", grid.width, grid.height).into_bytes();
    for &v in &grid.data {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if deep {
            out.push((q >> 8) as u8);
            out.push((q & 0xff) as u8);
        } else {
            out.push(q as u8);
        }
    }
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<PixelGrid> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn write_pnm(path: &Path, grid: &PixelGrid, deep: bool) -> Result<()> {
    Ok(std::fs::write(path, encode_pnm(grid, deep)?)?)
}

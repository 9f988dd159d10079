//! Bird's-eye-view features: flat-ground inverse perspective mapping of
//! pinhole views, sector merging, and in-plane rotation.
//!
//! A BEV grid is camera-centered: the camera sits on the center cell, grid
//! columns point east and grid rows point south *in the panorama's own
//! reference frame* (the frame whose heading 0 is the panorama's forward
//! direction). Cell `(i, j)` therefore covers the ground offset
//! `east = (j - ctr) * m`, `north = (ctr - i) * m` with `ctr = (grid-1)/2`.
//!
//! The center cell itself is always masked out: its ground point lies
//! directly beneath the camera and cannot be seen by a horizontal-axis
//! pinhole view.

use crate::error::{Error, Result};
use crate::img::PinholeView;
use crate::pano::ViewCamera;
use crate::util::wrap_deg_0_360;

/// Geometry of the ground grid a view is projected onto.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevConfig {
    /// Cells per side; must be odd so the camera sits on an exact center cell.
    pub grid_size: usize,
    pub meters_per_cell: f64,
    /// Camera height above the (flat) ground plane.
    pub camera_height_m: f64,
    /// Cells farther than this from the camera are masked out.
    pub max_range_m: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self { grid_size: 33, meters_per_cell: 0.5, camera_height_m: 1.6, max_range_m: 8.0 }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 3 || self.grid_size % 2 == 0 {
            return Err(Error::Config(format!(
                "BEV grid size must be odd and at least 3, got {}",
                self.grid_size
            )));
        }
        if !(self.meters_per_cell > 0.0) || !(self.camera_height_m > 0.0) {
            return Err(Error::Config("BEV cell size and camera height must be positive".into()));
        }
        if !(self.max_range_m > 0.0) {
            return Err(Error::Config("BEV range must be positive".into()));
        }
        if (self.grid_size as f64) * self.meters_per_cell < 2.0 * self.max_range_m {
            return Err(Error::Config(format!(
                "grid covers {} m per side, which cannot hold the {} m range disc",
                self.grid_size as f64 * self.meters_per_cell,
                2.0 * self.max_range_m
            )));
        }
        Ok(())
    }

    /// Center cell index along either axis.
    #[inline]
    pub fn center(&self) -> usize {
        (self.grid_size - 1) / 2
    }

    /// Ground offset (east, north) of a cell, in meters.
    #[inline]
    pub fn cell_offset_m(&self, i: usize, j: usize) -> (f64, f64) {
        let ctr = self.center() as f64;
        ((j as f64 - ctr) * self.meters_per_cell, (ctr - i as f64) * self.meters_per_cell)
    }
}

/// Per-pixel linear feature transform: maps raw pixel channels to the
/// feature space shared with the embedded map.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelEmbedding {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Row-major `out_channels x in_channels` matrix.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PixelEmbedding {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>, in_channels: usize, out_channels: usize) -> Result<Self> {
        if weight.len() != in_channels * out_channels || bias.len() != out_channels {
            return Err(Error::Input("pixel embedding weight/bias shapes disagree".into()));
        }
        Ok(Self { in_channels, out_channels, weight, bias })
    }

    /// Passes pixel channels through unchanged.
    pub fn identity(channels: usize) -> Self {
        let mut weight = vec![0.0; channels * channels];
        for c in 0..channels {
            weight[c * channels + c] = 1.0;
        }
        Self { in_channels: channels, out_channels: channels, weight, bias: vec![0.0; channels] }
    }

    pub fn random(rng: &mut impl rand::Rng, in_channels: usize, out_channels: usize, scale: f64) -> Self {
        let weight = (0..in_channels * out_channels)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        let bias = (0..out_channels).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect();
        Self { in_channels, out_channels, weight, bias }
    }

    #[inline]
    pub fn apply(&self, raw: &[f64], out: &mut [f64]) {
        debug_assert_eq!(raw.len(), self.in_channels);
        debug_assert_eq!(out.len(), self.out_channels);
        for c in 0..self.out_channels {
            let row = &self.weight[c * self.in_channels..(c + 1) * self.in_channels];
            let mut acc = self.bias[c];
            for (w, r) in row.iter().zip(raw) {
                acc += w * r;
            }
            out[c] = acc;
        }
    }
}

/// Camera-centered feature grid with a validity mask.
///
/// Values are stored channel-major (`c * grid^2 + i * grid + j`); masked-out
/// cells hold zero in every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature {
    pub grid_size: usize,
    pub channels: usize,
    pub meters_per_cell: f64,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl BevFeature {
    pub fn zeros(grid_size: usize, channels: usize, meters_per_cell: f64) -> Self {
        Self {
            grid_size,
            channels,
            meters_per_cell,
            values: vec![0.0; channels * grid_size * grid_size],
            mask: vec![false; grid_size * grid_size],
        }
    }

    #[inline]
    pub fn value_index(&self, c: usize, i: usize, j: usize) -> usize {
        c * self.grid_size * self.grid_size + i * self.grid_size + j
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i * self.grid_size + j
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// True for a valid cell that touches the grid edge or an invalid cell
    /// (4-neighborhood): the cells where adjacent sectors may legitimately
    /// both claim coverage.
    pub fn is_boundary_cell(&self, i: usize, j: usize) -> bool {
        if !self.mask[self.cell_index(i, j)] {
            return false;
        }
        let g = self.grid_size;
        if i == 0 || j == 0 || i == g - 1 || j == g - 1 {
            return true;
        }
        !(self.mask[self.cell_index(i - 1, j)]
            && self.mask[self.cell_index(i + 1, j)]
            && self.mask[self.cell_index(i, j - 1)]
            && self.mask[self.cell_index(i, j + 1)])
    }
}

/// True when `heading` falls inside the sector `[yaw, yaw + fov)`.
///
/// When the sector lies on the regular lattice (`yaw = k * fov` and
/// `n = 360/fov` integral) membership is decided by the integer sector index
/// `floor(heading / fov)`, which assigns every heading to exactly one of the
/// `n` sectors even when the heading sits within rounding distance of a
/// boundary. Arbitrary sectors fall back to an interval test.
pub fn sector_contains(heading_deg: f64, yaw_offset_deg: f64, fov_deg: f64) -> bool {
    let h = wrap_deg_0_360(heading_deg);
    let n = 360.0 / fov_deg;
    let k = yaw_offset_deg / fov_deg;
    if (n - n.round()).abs() < 1e-9 && (k - k.round()).abs() < 1e-9 {
        let n = n.round() as usize;
        let k = (k.round() as usize) % n;
        let s = ((h / fov_deg).floor() as usize).min(n - 1);
        s == k
    } else {
        wrap_deg_0_360(h - yaw_offset_deg) < fov_deg
    }
}

/// One BEV cell's bilinear footprint in the source view image.
#[derive(Debug, Clone)]
pub struct SampleTap {
    /// Flattened cell index `i * grid + j`.
    pub cell: usize,
    /// `(pixel index in the view grid, bilinear weight)`, clamped in-bounds.
    pub taps: [(usize, f64); 4],
}

/// Projects a pinhole view onto the ground grid (inverse perspective under a
/// flat-ground assumption) and embeds sampled pixels into feature space.
///
/// A cell is valid when it lies inside both the view's heading sector and the
/// range disc, excludes the camera cell itself, and its ground point projects
/// inside the view image. Returns the feature grid plus, for every valid
/// cell, the bilinear taps used to sample it (in mask scan order).
pub fn view_to_bev_traced(
    view: &PinholeView,
    embed: &PixelEmbedding,
    cfg: &BevConfig,
) -> Result<(BevFeature, Vec<SampleTap>)> {
    cfg.validate()?;
    if embed.in_channels != view.pixels.channels {
        return Err(Error::Input(format!(
            "pixel embedding expects {} channels, view has {}",
            embed.in_channels, view.pixels.channels
        )));
    }
    let g = cfg.grid_size;
    let cam = ViewCamera::new(
        view.pixels.width,
        view.pixels.height,
        view.fov_deg,
        view.yaw_offset_deg + view.fov_deg / 2.0,
    )?;
    let (vw, vh) = (view.pixels.width, view.pixels.height);
    let p = view.pixels.channels;

    let mut out = BevFeature::zeros(g, embed.out_channels, cfg.meters_per_cell);
    let mut taps_out = Vec::new();
    let mut raw = vec![0.0; p];
    let mut feat = vec![0.0; embed.out_channels];

    for i in 0..g {
        for j in 0..g {
            let (e, n) = cfg.cell_offset_m(i, j);
            let r = e.hypot(n);
            if r <= 0.0 || r > cfg.max_range_m {
                continue;
            }
            let heading = e.atan2(n).to_degrees();
            if !sector_contains(heading, view.yaw_offset_deg, view.fov_deg) {
                continue;
            }
            let (px, py) = match cam.point_to_pixel([e, n, -cfg.camera_height_m]) {
                Some(q) => q,
                None => continue,
            };
            // Sector-edge cells project up to half a pixel outside the pixel
            // centers; the sector test already bounds the true angular extent,
            // so clamp instead of rejecting there. Vertically there is no such
            // guarantee: a short image genuinely cannot see near cells.
            if !(py >= 0.0 && py <= (vh - 1) as f64) {
                continue;
            }
            if !(px >= -0.5 - 1e-9 && px <= (vw as f64) - 0.5 + 1e-9) {
                continue;
            }
            let px = px.clamp(0.0, (vw - 1) as f64);

            let x0 = px.floor();
            let y0 = py.floor();
            let fx = px - x0;
            let fy = py - y0;
            let x0 = x0 as usize;
            let y0 = y0 as usize;
            let x1 = (x0 + 1).min(vw - 1);
            let y1 = (y0 + 1).min(vh - 1);
            let taps = [
                (y0 * vw + x0, (1.0 - fx) * (1.0 - fy)),
                (y0 * vw + x1, fx * (1.0 - fy)),
                (y1 * vw + x0, (1.0 - fx) * fy),
                (y1 * vw + x1, fx * fy),
            ];

            for q in 0..p {
                raw[q] = taps.iter().map(|&(t, w)| view.pixels.data[t * p + q] * w).sum();
            }
            embed.apply(&raw, &mut feat);

            let cell = out.cell_index(i, j);
            out.mask[cell] = true;
            for (c, &v) in feat.iter().enumerate() {
                let vi = out.value_index(c, i, j);
                out.values[vi] = v;
            }
            taps_out.push(SampleTap { cell, taps });
        }
    }
    Ok((out, taps_out))
}

/// [`view_to_bev_traced`] without the sampling trace.
pub fn view_to_bev(view: &PinholeView, embed: &PixelEmbedding, cfg: &BevConfig) -> Result<BevFeature> {
    view_to_bev_traced(view, embed, cfg).map(|(b, _)| b)
}

/// Smallest view height whose vertical extent covers every disc cell of the
/// given sector width, so that sector masks tile the whole range disc.
pub fn min_view_height_for_full_disc(cfg: &BevConfig, fov_deg: f64, out_width: usize) -> Result<usize> {
    cfg.validate()?;
    let focal = crate::img::focal_px(out_width, fov_deg);
    let g = cfg.grid_size;
    // The binding cell minimizes the forward distance z = r*cos(bearing from
    // the axis); scan one sector explicitly (symmetry covers the others).
    let mut z_min = f64::INFINITY;
    for i in 0..g {
        for j in 0..g {
            let (e, n) = cfg.cell_offset_m(i, j);
            let r = e.hypot(n);
            if r <= 0.0 || r > cfg.max_range_m {
                continue;
            }
            let heading = wrap_deg_0_360(e.atan2(n).to_degrees());
            if !sector_contains(heading, 0.0, fov_deg) {
                continue;
            }
            let bearing = heading - fov_deg / 2.0;
            let z = r * bearing.to_radians().cos();
            z_min = z_min.min(z);
        }
    }
    if !z_min.is_finite() {
        return Err(Error::Config("range disc holds no cells".into()));
    }
    let half = focal * cfg.camera_height_m / z_min;
    Ok((2.0 * half).ceil() as usize + 2)
}

/// Merges per-sector BEV grids into one grid.
///
/// Masks must be pairwise disjoint except on sector-boundary cells, where the
/// lowest input index wins; overlap on any interior cell is a consistency
/// error.
pub fn merge_bevs(parts: &[BevFeature]) -> Result<BevFeature> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Input("cannot merge an empty list of BEV grids".into()))?;
    for (idx, p) in parts.iter().enumerate() {
        if p.grid_size != first.grid_size
            || p.channels != first.channels
            || p.meters_per_cell != first.meters_per_cell
        {
            return Err(Error::Input(format!(
                "BEV grid {idx} disagrees with grid 0 in size, channels or scale"
            )));
        }
    }
    let g = first.grid_size;
    let mut out = BevFeature::zeros(g, first.channels, first.meters_per_cell);
    for i in 0..g {
        for j in 0..g {
            let cell = i * g + j;
            let mut winner: Option<usize> = None;
            for (idx, p) in parts.iter().enumerate() {
                if !p.mask[cell] {
                    continue;
                }
                match winner {
                    None => winner = Some(idx),
                    Some(w) => {
                        // A second claimant is only legal on a shared boundary.
                        if !(parts[w].is_boundary_cell(i, j) && p.is_boundary_cell(i, j)) {
                            return Err(Error::Consistency(format!(
                                "BEV grids {w} and {idx} both cover interior cell ({i}, {j})"
                            )));
                        }
                    }
                }
            }
            if let Some(w) = winner {
                out.mask[cell] = true;
                for c in 0..first.channels {
                    let vi = out.value_index(c, i, j);
                    out.values[vi] = parts[w].values[parts[w].value_index(c, i, j)];
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear taps and nearest-neighbor source for every rotated output cell.
#[derive(Debug, Clone)]
pub(crate) struct RotationPlan {
    pub grid: usize,
    /// `None` when the source point falls outside the grid.
    pub cells: Vec<Option<PlanCell>>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PlanCell {
    /// Nearest source cell; decides the rotated mask.
    pub nearest: usize,
    pub taps: [(usize, f64); 4],
}

/// Precomputes the resampling geometry of an in-plane rotation by
/// `angle_deg` about the grid center. Exact 90° multiples become pure cell
/// permutations (single unit-weight tap).
pub(crate) fn rotation_plan(grid: usize, angle_deg: f64) -> RotationPlan {
    let ctr = (grid as f64 - 1.0) / 2.0;
    let r = angle_deg.rem_euclid(360.0);
    let mut cells = Vec::with_capacity(grid * grid);

    // Heading-sense rotation by -angle of the output cell vector (east, north).
    let quarter = if r == 0.0 {
        Some(0u8)
    } else if r == 90.0 {
        Some(1)
    } else if r == 180.0 {
        Some(2)
    } else if r == 270.0 {
        Some(3)
    } else {
        None
    };

    for i in 0..grid {
        for j in 0..grid {
            let e = j as f64 - ctr;
            let n = ctr - i as f64;
            let (se, sn) = match quarter {
                Some(0) => (e, n),
                Some(1) => (-n, e),  // R(-90): heading h maps to h - 90
                Some(2) => (-e, -n), // R(-180)
                Some(3) => (n, -e),  // R(-270)
                _ => {
                    let (sa, ca) = r.to_radians().sin_cos();
                    (e * ca - n * sa, e * sa + n * ca)
                }
            };
            let sj = ctr + se;
            let si = ctr - sn;
            let nj = sj.round();
            let ni = si.round();
            if ni < 0.0 || nj < 0.0 || ni > (grid - 1) as f64 || nj > (grid - 1) as f64 {
                cells.push(None);
                continue;
            }
            let nearest = ni as usize * grid + nj as usize;
            let taps = if quarter.is_some() {
                [(nearest, 1.0), (nearest, 0.0), (nearest, 0.0), (nearest, 0.0)]
            } else {
                let x0f = sj.floor();
                let y0f = si.floor();
                let fx = sj - x0f;
                let fy = si - y0f;
                let x0 = (x0f.max(0.0) as usize).min(grid - 1);
                let y0 = (y0f.max(0.0) as usize).min(grid - 1);
                let x1 = (x0 + 1).min(grid - 1);
                let y1 = (y0 + 1).min(grid - 1);
                [
                    (y0 * grid + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * grid + x1, fx * (1.0 - fy)),
                    (y1 * grid + x0, (1.0 - fx) * fy),
                    (y1 * grid + x1, fx * fy),
                ]
            };
            cells.push(Some(PlanCell { nearest, taps }));
        }
    }
    RotationPlan { grid, cells }
}

pub(crate) fn rotate_bev_with_plan(bev: &BevFeature, plan: &RotationPlan) -> BevFeature {
    debug_assert_eq!(plan.grid, bev.grid_size);
    let g = bev.grid_size;
    let gg = g * g;
    let mut out = BevFeature::zeros(g, bev.channels, bev.meters_per_cell);
    // All-zero channels resample to all zeros; skip them.
    let live: Vec<usize> = (0..bev.channels)
        .filter(|&c| bev.values[c * gg..(c + 1) * gg].iter().any(|&v| v != 0.0))
        .collect();
    for (cell, entry) in plan.cells.iter().enumerate() {
        let Some(pc) = entry else { continue };
        if !bev.mask[pc.nearest] {
            continue;
        }
        out.mask[cell] = true;
        for &c in &live {
            let base = c * gg;
            let mut acc = 0.0;
            for &(src, w) in &pc.taps {
                acc += bev.values[base + src] * w;
            }
            out.values[base + cell] = acc;
        }
    }
    out
}

/// Rotates values and mask about the grid center by `angle_deg` (heading
/// sense: a feature north of the camera moves east under +90°). Values are
/// resampled bilinearly, the mask by nearest neighbor; cells whose source
/// falls outside the grid become invalid, and exact 90° multiples are
/// lossless cell permutations.
pub fn rotate_bev(bev: &BevFeature, angle_deg: f64) -> BevFeature {
    rotate_bev_with_plan(bev, &rotation_plan(bev.grid_size, angle_deg))
}

//! Rotation-aware template matching of ground features against a map.
//!
//! A camera-frame feature grid is scored against every map placement
//! `(v, u)` and candidate heading bin `k`: the template is rotated to the
//! bin's heading, overlaid with its center cell on map pixel `(v, u)`, and
//! the per-cell feature dot products are averaged over the template's valid
//! cells. Placements where any valid cell would leave the map are marked
//! with a large negative sentinel instead of a score.
//!
//! Two implementations produce identical volumes: a direct sliding-window
//! accumulation and an FFT cross-correlation that shares one set of map
//! spectra across all heading bins.

use crate::bev::{rotate_bev, BevFeature};
use crate::embed::NeuralMap;
use crate::error::{Error, Result};
use crate::osm::GeoPoint;
use crate::util::init_thread_pool_from_env;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Score stored for placements whose template support leaves the map.
pub const OUT_OF_BOUNDS_SCORE: f64 = -1e9;

/// Default heading bin count while fitting parameters.
pub const ROTATIONS_TRAIN_DEFAULT: usize = 64;
/// Default heading bin count for inference.
pub const ROTATIONS_EVAL_DEFAULT: usize = 256;

/// Heading bin centers in degrees, half a bin off the ±180 seam so every
/// center lies in (−180, 180].
pub fn angle_bins(rotations: usize) -> Vec<f64> {
    let step = 360.0 / rotations as f64;
    (0..rotations).map(|k| -180.0 + (k as f64 + 0.5) * step).collect()
}

/// Heading bin whose interval contains `theta_deg` (expected in
/// (−180, 180]); an angle exactly on a bin edge snaps to the lower bin.
pub fn bin_index_for_angle(theta_deg: f64, rotations: usize) -> usize {
    let step = 360.0 / rotations as f64;
    let t = (theta_deg + 180.0) / step;
    let mut k = t.floor() as isize;
    if t == k as f64 && k > 0 {
        k -= 1;
    }
    k.clamp(0, rotations as isize - 1) as usize
}

/// Dense match scores over map placements and heading bins.
///
/// Layout is placement-major with the heading bin innermost:
/// `scores[(v * width + u) * rotations + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    /// Map height in pixels (the `v` axis).
    pub height: usize,
    /// Map width in pixels (the `u` axis).
    pub width: usize,
    /// Heading bin count (the `k` axis).
    pub rotations: usize,
    /// Heading of each bin center in degrees.
    pub angle_bins_deg: Vec<f64>,
    pub meters_per_px: f64,
    pub anchor: GeoPoint,
    pub embedding_id: String,
    pub scores: Vec<f64>,
}

impl ScoreVolume {
    #[inline]
    pub fn index(&self, v: usize, u: usize, k: usize) -> usize {
        (v * self.width + u) * self.rotations + k
    }

    #[inline]
    pub fn score_at(&self, v: usize, u: usize, k: usize) -> f64 {
        self.scores[self.index(v, u, k)]
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.rotations
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shared validation for both matcher implementations. Returns the
/// per-heading rotated templates together with their valid counts and
/// valid-cell bounding boxes.
struct MatchSetup {
    rotated: Vec<BevFeature>,
    bins: Vec<f64>,
}

fn setup(template: &BevFeature, map: &NeuralMap, rotations: usize) -> Result<MatchSetup> {
    if rotations == 0 {
        return Err(Error::Input("rotation bin count must be positive".into()));
    }
    if template.channels != map.channels {
        return Err(Error::Input(format!(
            "template has {} feature channels but the map has {}",
            template.channels, map.channels
        )));
    }
    if (template.meters_per_cell - map.meters_per_px).abs() > 1e-9 {
        return Err(Error::Consistency(format!(
            "template resolution {} m/cell does not match map resolution {} m/px",
            template.meters_per_cell, map.meters_per_px
        )));
    }
    if template.valid_count() == 0 {
        return Err(Error::Degenerate("template has no valid cells".into()));
    }
    let bins = angle_bins(rotations);
    let rotated: Vec<BevFeature> = bins.par_iter().map(|&a| rotate_bev(template, a)).collect();
    if let Some(k) = rotated.iter().position(|r| r.valid_count() == 0) {
        return Err(Error::Degenerate(format!(
            "template loses all valid cells when rotated to {:.3}°",
            bins[k]
        )));
    }
    Ok(MatchSetup { rotated, bins })
}

/// Bounding box of a feature's valid cells: `(i0, i1, j0, j1)` inclusive.
pub(crate) fn valid_bbox(f: &BevFeature) -> (usize, usize, usize, usize) {
    let g = f.grid_size;
    let (mut i0, mut i1, mut j0, mut j1) = (g, 0usize, g, 0usize);
    for i in 0..g {
        for j in 0..g {
            if f.mask[i * g + j] {
                i0 = i0.min(i);
                i1 = i1.max(i);
                j0 = j0.min(j);
                j1 = j1.max(j);
            }
        }
    }
    (i0, i1, j0, j1)
}

pub(crate) fn volume_from_planes(
    map: &NeuralMap,
    bins: Vec<f64>,
    planes: Vec<Vec<f64>>,
) -> ScoreVolume {
    let rotations = planes.len();
    let mut scores = vec![0.0; map.height * map.width * rotations];
    for (k, plane) in planes.iter().enumerate() {
        for (p, &s) in plane.iter().enumerate() {
            scores[p * rotations + k] = s;
        }
    }
    ScoreVolume {
        height: map.height,
        width: map.width,
        rotations,
        angle_bins_deg: bins,
        meters_per_px: map.meters_per_px,
        anchor: map.anchor,
        embedding_id: map.embedding_id.clone(),
        scores,
    }
}

/// Scores one rotated template against every placement by direct
/// accumulation. Returns a `height × width` plane of final scores.
pub(crate) fn correlate_direct(rt: &BevFeature, map: &NeuralMap) -> Vec<f64> {
    let g = rt.grid_size;
    let ct = (g - 1) / 2;
    let (h, w) = (map.height, map.width);
    let n_k = rt.valid_count() as f64;
    let mut dots = vec![0.0f64; h * w];
    for i in 0..g {
        for j in 0..g {
            if !rt.mask[i * g + j] {
                continue;
            }
            let dy = i as isize - ct as isize;
            let dx = j as isize - ct as isize;
            // Placement rows/cols for which this cell stays on the map.
            let v0 = (-dy).max(0) as usize;
            let v1 = ((h as isize - dy).min(h as isize)) as usize;
            let u0 = (-dx).max(0) as usize;
            let u1 = ((w as isize - dx).min(w as isize)) as usize;
            for c in 0..rt.channels {
                let t = rt.values[rt.value_index(c, i, j)];
                if t == 0.0 {
                    continue;
                }
                for v in v0..v1 {
                    let my = (v as isize + dy) as usize;
                    let map_row = &map.values[(c * h + my) * w..(c * h + my + 1) * w];
                    let dot_row = &mut dots[v * w..(v + 1) * w];
                    for u in u0..u1 {
                        dot_row[u] += t * map_row[(u as isize + dx) as usize];
                    }
                }
            }
        }
    }
    finalize_plane(h, w, ct, valid_bbox(rt), n_k, |p| dots[p])
}

/// Inclusive placement window `(v_lo, v_hi, u_lo, u_hi)` whose placements
/// keep every valid cell of a template with the given bounding box on an
/// `h × w` map, or `None` when no placement has full support.
///
/// Placement (v, u) keeps cell (i, j) on the map iff 0 ≤ v + i − ct < h
/// (and likewise for u), so the valid-cell bounding box gives the exact
/// placement range.
pub(crate) fn support_window(
    h: usize,
    w: usize,
    ct: usize,
    bbox: (usize, usize, usize, usize),
) -> Option<(usize, usize, usize, usize)> {
    let (i0, i1, j0, j1) = bbox;
    if i1 >= h + ct || j1 >= w + ct {
        return None;
    }
    let v_lo = ct.saturating_sub(i0);
    let u_lo = ct.saturating_sub(j0);
    let v_hi = (h + ct).saturating_sub(i1 + 1).min(h - 1);
    let u_hi = (w + ct).saturating_sub(j1 + 1).min(w - 1);
    if v_lo > v_hi || u_lo > u_hi {
        return None;
    }
    Some((v_lo, v_hi, u_lo, u_hi))
}

/// Applies the support-in-bounds rule to a raw dot-product plane.
fn finalize_plane(
    h: usize,
    w: usize,
    ct: usize,
    bbox: (usize, usize, usize, usize),
    n_k: f64,
    dot_at: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let mut plane = vec![OUT_OF_BOUNDS_SCORE; h * w];
    if let Some((v_lo, v_hi, u_lo, u_hi)) = support_window(h, w, ct, bbox) {
        for v in v_lo..=v_hi {
            for u in u_lo..=u_hi {
                plane[v * w + u] = dot_at(v * w + u) / n_k;
            }
        }
    }
    plane
}

/// Exhaustive matcher: direct sliding-window scoring of every heading bin.
pub fn match_exhaustive(
    template: &BevFeature,
    map: &NeuralMap,
    rotations: usize,
) -> Result<ScoreVolume> {
    init_thread_pool_from_env();
    let MatchSetup { rotated, bins } = setup(template, map, rotations)?;
    let planes: Vec<Vec<f64>> = rotated.par_iter().map(|rt| correlate_direct(rt, map)).collect();
    Ok(volume_from_planes(map, bins, planes))
}

// ── FFT path ────────────────────────────────────────────────────────────────

/// Planned 1-D transforms for a fixed 2-D size, shared across threads.
struct Fft2Plan {
    w: usize,
    h: usize,
    fw: Arc<dyn Fft<f64>>,
    fh: Arc<dyn Fft<f64>>,
    iw: Arc<dyn Fft<f64>>,
    ih: Arc<dyn Fft<f64>>,
}

impl Fft2Plan {
    fn new(w: usize, h: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            w,
            h,
            fw: planner.plan_fft_forward(w),
            fh: planner.plan_fft_forward(h),
            iw: planner.plan_fft_inverse(w),
            ih: planner.plan_fft_inverse(h),
        }
    }

    fn rows(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        for row in data.chunks_exact_mut(fft.len()) {
            fft.process_with_scratch(row, &mut scratch);
        }
    }

    fn transpose(&self, data: &[Complex64], w: usize, h: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); data.len()];
        for y in 0..h {
            for x in 0..w {
                out[x * h + y] = data[y * w + x];
            }
        }
        out
    }

    /// In-place 2-D transform of a `h × w` row-major buffer.
    fn forward(&self, data: &mut Vec<Complex64>) {
        self.rows(data, &self.fw);
        let mut t = self.transpose(data, self.w, self.h);
        self.rows(&mut t, &self.fh);
        *data = self.transpose(&t, self.h, self.w);
    }

    /// Unscaled inverse; callers divide by `w·h` once.
    fn inverse(&self, data: &mut Vec<Complex64>) {
        self.rows(data, &self.iw);
        let mut t = self.transpose(data, self.w, self.h);
        self.rows(&mut t, &self.ih);
        *data = self.transpose(&t, self.h, self.w);
    }
}

/// Smallest 5-smooth integer ≥ `n`: the transform sizes rustfft handles
/// with its fastest (radix 2/3/5) kernels.
fn next_fast_fft_size(n: usize) -> usize {
    (n.max(1)..)
        .find(|&size| {
            let mut m = size;
            for p in [2, 3, 5] {
                while m % p == 0 {
                    m /= p;
                }
            }
            m == 1
        })
        .expect("powers of two alone make the search finite")
}

/// Packs a `h × w` real image into the top-left corner of a zeroed
/// `ph × pw` complex buffer.
fn pack_padded(src: impl Fn(usize, usize) -> f64, w: usize, h: usize, pw: usize, ph: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); pw * ph];
    for y in 0..h {
        for x in 0..w {
            out[y * pw + x] = Complex64::new(src(y, x), 0.0);
        }
    }
    out
}

/// FFT matcher: shares map spectra across heading bins, then per bin does
/// one forward transform per non-zero feature channel and a single inverse
/// transform of the accumulated spectrum.
pub fn match_fft(template: &BevFeature, map: &NeuralMap, rotations: usize) -> Result<ScoreVolume> {
    init_thread_pool_from_env();
    let MatchSetup { rotated, bins } = setup(template, map, rotations)?;
    let g = template.grid_size;
    let ct = (g - 1) / 2;
    let (h, w, ch) = (map.height, map.width, map.channels);
    let pw = next_fast_fft_size(w + g - 1);
    let ph = next_fast_fft_size(h + g - 1);
    let plan = Arc::new(Fft2Plan::new(pw, ph));
    let norm = 1.0 / (pw as f64 * ph as f64);

    // Map spectra, computed once and shared by every heading bin.
    let map_spectra: Vec<Vec<Complex64>> = (0..ch)
        .into_par_iter()
        .map(|c| {
            let mut buf = pack_padded(|y, x| map.value_at(c, y, x), w, h, pw, ph);
            plan.forward(&mut buf);
            buf
        })
        .collect();
    let planes: Vec<Vec<f64>> = rotated
        .par_iter()
        .map(|rt| {
            let n_k = rt.valid_count() as f64;
            // Correlation lag (dy, dx) lands at circular index
            // (dy mod ph, dx mod pw); padding ≥ h+g−1 keeps lags alias-free.
            let mut acc = vec![Complex64::default(); pw * ph];
            for c in 0..ch {
                let channel = &rt.values[c * g * g..(c + 1) * g * g];
                if channel.iter().all(|&v| v == 0.0) {
                    continue; // contributes nothing to any dot product
                }
                let mut t = pack_padded(
                    |i, j| if rt.mask[i * g + j] { channel[i * g + j] } else { 0.0 },
                    g,
                    g,
                    pw,
                    ph,
                );
                plan.forward(&mut t);
                for (a, (ts, ms)) in acc.iter_mut().zip(t.iter().zip(&map_spectra[c])) {
                    *a += ts.conj() * ms;
                }
            }
            plan.inverse(&mut acc);
            finalize_plane(h, w, ct, valid_bbox(rt), n_k, |p| {
                let dy = (p / w) as isize - ct as isize;
                let dx = (p % w) as isize - ct as isize;
                let idx =
                    dy.rem_euclid(ph as isize) as usize * pw + dx.rem_euclid(pw as isize) as usize;
                acc[idx].re * norm
            })
        })
        .collect();
    Ok(volume_from_planes(map, bins, planes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::BevFeature;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ANCHOR: GeoPoint = GeoPoint { lat_deg: 48.2, lon_deg: 16.37 };

    /// Disc-masked feature with values from `fill(c, i, j)`.
    fn disc_feature(
        grid: usize,
        channels: usize,
        radius_cells: f64,
        fill: impl Fn(usize, usize, usize) -> f64,
    ) -> BevFeature {
        let mut f = BevFeature::zeros(grid, channels, 0.5);
        let ct = (grid - 1) as f64 / 2.0;
        for i in 0..grid {
            for j in 0..grid {
                let r = ((i as f64 - ct).powi(2) + (j as f64 - ct).powi(2)).sqrt();
                if r <= radius_cells {
                    f.mask[i * grid + j] = true;
                    for c in 0..channels {
                        let vi = f.value_index(c, i, j);
                        f.values[vi] = fill(c, i, j);
                    }
                }
            }
        }
        f
    }

    fn noise_map(w: usize, h: usize, ch: usize, seed: u64) -> NeuralMap {
        let mut m = NeuralMap::zeros(w, h, ch, 0.5, ANCHOR, "test");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in m.values.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn padded_sizes_are_the_next_5_smooth_integer() {
        for (n, expect) in [(1, 1), (7, 8), (11, 12), (92, 96), (97, 100), (128, 128), (129, 135)] {
            assert_eq!(next_fast_fft_size(n), expect, "n = {n}");
        }
    }

    #[test]
    fn angle_bins_avoid_the_seam_and_cover_the_circle() {
        assert_eq!(angle_bins(1), vec![0.0]);
        assert_eq!(angle_bins(2), vec![-90.0, 90.0]);
        assert_eq!(angle_bins(4), vec![-135.0, -45.0, 45.0, 135.0]);
        let bins = angle_bins(256);
        assert!(bins.windows(2).all(|w| w[1] > w[0]));
        assert!(bins.iter().all(|&b| b > -180.0 && b <= 180.0));
    }

    #[test]
    fn bin_snapping_uses_lower_bin_on_exact_edges() {
        assert_eq!(bin_index_for_angle(-135.0, 4), 0);
        assert_eq!(bin_index_for_angle(-90.0, 4), 0); // edge → lower bin
        assert_eq!(bin_index_for_angle(-89.99, 4), 1);
        assert_eq!(bin_index_for_angle(180.0, 4), 3);
        assert_eq!(bin_index_for_angle(179.0, 256), 255);
        assert_eq!(bin_index_for_angle(-180.0, 4), 0);
    }

    #[test]
    fn uniform_fields_score_the_plain_dot_product_everywhere_in_bounds() {
        let mut t = BevFeature::zeros(5, 2, 0.5);
        t.mask.iter_mut().for_each(|m| *m = true);
        for i in 0..5 {
            for j in 0..5 {
                let v0 = t.value_index(0, i, j);
                t.values[v0] = 0.3;
                let v1 = t.value_index(1, i, j);
                t.values[v1] = -0.7;
            }
        }
        let mut map = NeuralMap::zeros(12, 10, 2, 0.5, ANCHOR, "test");
        let plane = 10 * 12;
        map.values[..plane].iter_mut().for_each(|v| *v = 2.0);
        map.values[plane..].iter_mut().for_each(|v| *v = 0.5);
        let expected = 0.3 * 2.0 + (-0.7) * 0.5;

        let vol = match_exhaustive(&t, &map, 1).unwrap();
        let mut in_bounds = 0;
        for v in 0..10 {
            for u in 0..12 {
                let s = vol.score_at(v, u, 0);
                if (2..8).contains(&v) && (2..10).contains(&u) {
                    assert!((s - expected).abs() < 1e-12, "({u},{v}) got {s}");
                    in_bounds += 1;
                } else {
                    assert_eq!(s, OUT_OF_BOUNDS_SCORE, "({u},{v})");
                }
            }
        }
        assert_eq!(in_bounds, 6 * 8);

        // Rotated bins on a uniform field still average the same product.
        let vol4 = match_exhaustive(&t, &map, 4).unwrap();
        for k in 0..4 {
            let s = vol4.score_at(5, 6, k);
            assert!((s - expected).abs() < 1e-9, "bin {k} got {s}");
        }
    }

    #[test]
    fn window_cut_from_the_map_is_recovered_exactly_without_rotation() {
        let map = noise_map(24, 20, 3, 41);
        let (gt_v, gt_u) = (8usize, 15usize);
        let mut t = disc_feature(9, 3, 4.2, |_, _, _| 0.0);
        for i in 0..9 {
            for j in 0..9 {
                if t.mask[i * 9 + j] {
                    for c in 0..3 {
                        let vi = t.value_index(c, i, j);
                        t.values[vi] = map.value_at(c, gt_v + i - 4, gt_u + j - 4);
                    }
                }
            }
        }
        let vol = match_exhaustive(&t, &map, 1).unwrap();
        let mut best = (0, 0, f64::NEG_INFINITY);
        for v in 0..20 {
            for u in 0..24 {
                let s = vol.score_at(v, u, 0);
                if s > best.2 {
                    best = (v, u, s);
                }
            }
        }
        assert_eq!((best.0, best.1), (gt_v, gt_u));
        // The peak equals the template's mean squared value exactly.
        let n = t.valid_count() as f64;
        let energy: f64 = t.values.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((best.2 - energy).abs() < 1e-12);
    }

    #[test]
    fn quarter_turn_headings_are_recovered_losslessly() {
        // K = 2 puts bin centers exactly on ±90°, where rotation is a
        // permutation, so a window cut at heading +90° matches exactly.
        let map = noise_map(21, 21, 2, 99);
        let (gt_v, gt_u) = (9usize, 11usize);
        let mut window = disc_feature(7, 2, 3.0, |_, _, _| 0.0);
        for i in 0..7 {
            for j in 0..7 {
                if window.mask[i * 7 + j] {
                    for c in 0..2 {
                        let vi = window.value_index(c, i, j);
                        window.values[vi] = map.value_at(c, gt_v + i - 3, gt_u + j - 3);
                    }
                }
            }
        }
        // The camera-frame template is the world window rotated back by −90°.
        let template = rotate_bev(&window, -90.0);
        let vol = match_exhaustive(&template, &map, 2).unwrap();
        let mut best = (0, 0, 0, f64::NEG_INFINITY);
        for v in 0..21 {
            for u in 0..21 {
                for k in 0..2 {
                    let s = vol.score_at(v, u, k);
                    if s > best.3 {
                        best = (v, u, k, s);
                    }
                }
            }
        }
        assert_eq!((best.0, best.1, best.2), (gt_v, gt_u, 1), "bin 1 is +90°");
    }

    #[test]
    fn fft_and_direct_matchers_agree_everywhere() {
        let map = noise_map(32, 32, 5, 7);
        let t = disc_feature(11, 5, 5.0, |c, i, j| ((c + 2 * i + 3 * j) % 7) as f64 * 0.25 - 0.5);
        for rotations in [4usize, 64] {
            let a = match_exhaustive(&t, &map, rotations).unwrap();
            let b = match_fft(&t, &map, rotations).unwrap();
            assert_eq!(a.len(), b.len());
            let mut worst = 0.0f64;
            for i in 0..a.scores.len() {
                let (x, y) = (a.scores[i], b.scores[i]);
                if x == OUT_OF_BOUNDS_SCORE || y == OUT_OF_BOUNDS_SCORE {
                    assert_eq!(x, y, "sentinel mismatch at {i} (K={rotations})");
                } else {
                    worst = worst.max((x - y).abs());
                }
            }
            assert!(worst < 1e-6, "worst deviation {worst} at K={rotations}");
        }
    }

    #[test]
    fn off_center_support_extends_the_in_bounds_region() {
        // Valid cells only in the top-left 2×2 corner of a 5×5 template:
        // the support can hang off the bottom-right of the map.
        let mut t = BevFeature::zeros(5, 1, 0.5);
        for i in 0..2 {
            for j in 0..2 {
                t.mask[i * 5 + j] = true;
                let vi = t.value_index(0, i, j);
                t.values[vi] = 1.0;
            }
        }
        let map = noise_map(10, 8, 1, 3);
        let vol = match_exhaustive(&t, &map, 1).unwrap();
        let in_bounds = vol.scores.iter().filter(|&&s| s != OUT_OF_BOUNDS_SCORE).count();
        // Cells (i,j) ∈ {0,1}² at offsets {−2,−1}: v−2 ≥ 0 and v−1 ≤ 7 keep
        // v ∈ 2..=7 (6 rows); u ∈ 2..=9 (8 cols).
        assert_eq!(in_bounds, 6 * 8);
        assert_eq!(vol.score_at(2, 2, 0), {
            let d = map.value_at(0, 0, 0) + map.value_at(0, 0, 1) + map.value_at(0, 1, 0)
                + map.value_at(0, 1, 1);
            d / 4.0
        });
        assert_eq!(vol.score_at(1, 2, 0), OUT_OF_BOUNDS_SCORE);
    }

    #[test]
    fn incompatible_inputs_are_rejected() {
        let t = disc_feature(5, 2, 2.0, |_, _, _| 1.0);
        let map3 = noise_map(16, 16, 3, 1);
        assert!(matches!(match_exhaustive(&t, &map3, 4), Err(Error::Input(_))));

        let mut map_wrong_res = noise_map(16, 16, 2, 1);
        map_wrong_res.meters_per_px = 0.25;
        assert!(matches!(
            match_exhaustive(&t, &map_wrong_res, 4),
            Err(Error::Consistency(_))
        ));

        let empty = BevFeature::zeros(5, 2, 0.5);
        let map2 = noise_map(16, 16, 2, 1);
        assert!(matches!(match_exhaustive(&empty, &map2, 4), Err(Error::Degenerate(_))));

        assert!(matches!(match_exhaustive(&t, &map2, 0), Err(Error::Input(_))));
    }
}

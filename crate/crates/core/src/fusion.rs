//! Probability fusion over match-score volumes.
//!
//! Scores become joint log-probabilities over (placement, heading) via a
//! global log-softmax. Two marginals drive the fusion: the position prior
//! (log-sum-exp over heading bins) and the heading prior (log-sum-exp over
//! placements). The full two-stage scheme blends a panorama volume with a
//! single-view volume:
//!
//! 1. normalize both volumes;
//! 2. sharpen the view volume with the panorama's position prior
//!    (`(1−α)·view + α·prior`), then renormalize it;
//! 3. extract the sharpened volume's heading prior and blend it into the
//!    panorama volume (`(1−β)·pano + β·prior`).
//!
//! The blended result is scored by argmax; reduced strategies reuse the
//! same pieces.

use crate::error::{Error, Result};
use crate::img::PixelGrid;
use crate::matching::{ScoreVolume, OUT_OF_BOUNDS_SCORE};
use crate::util::logsumexp;

/// Blend weights, both in `[0, 1]`: `alpha` scales the position prior fed
/// to the view volume, `beta` the heading prior fed back to the panorama
/// volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub alpha: f64,
    pub beta: f64,
}

impl FusionParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!(
                "fusion weights must lie in [0, 1], got alpha {alpha}, beta {beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5 }
    }
}

/// How the panorama and view volumes are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    /// Full two-stage position-then-heading fusion.
    TwoStage,
    /// Stop after the position prior: argmax the sharpened view volume.
    PositionPriorOnly,
    /// Blend the raw view volume's heading prior into the panorama volume.
    HeadingPriorOnly,
    /// Argmax the normalized panorama volume alone.
    NoFusion,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pof" => Ok(Self::TwoStage),
            "prior-uv" => Ok(Self::PositionPriorOnly),
            "prior-theta" => Ok(Self::HeadingPriorOnly),
            "none" => Ok(Self::NoFusion),
            other => Err(Error::Config(format!(
                "unknown fusion strategy `{other}` (expected pof, prior-uv, prior-theta or none)"
            ))),
        }
    }
}

impl FusionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::TwoStage => "pof",
            Self::PositionPriorOnly => "prior-uv",
            Self::HeadingPriorOnly => "prior-theta",
            Self::NoFusion => "none",
        }
    }
}

/// An estimated pose: map pixel plus heading-bin center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Map column.
    pub u: usize,
    /// Map row.
    pub v: usize,
    /// Heading in degrees, in (−180, 180].
    pub theta_deg: f64,
}

// ── normalized containers ───────────────────────────────────────────────────

const NORMALIZATION_TOL: f64 = 1e-9;

/// Joint log-probabilities over (v, u, k); log-sum-exp of all entries is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbVolume {
    pub height: usize,
    pub width: usize,
    pub rotations: usize,
    pub angle_bins_deg: Vec<f64>,
    pub values: Vec<f64>,
}

impl LogProbVolume {
    pub fn new(
        height: usize,
        width: usize,
        rotations: usize,
        angle_bins_deg: Vec<f64>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != height * width * rotations || angle_bins_deg.len() != rotations {
            return Err(Error::Input(format!(
                "log-probability volume shape {height}×{width}×{rotations} does not match its data"
            )));
        }
        let lse = logsumexp(&values);
        if !(lse.abs() <= NORMALIZATION_TOL) {
            return Err(Error::Consistency(format!(
                "log-probability volume is not normalized: total log mass {lse:e}"
            )));
        }
        Ok(Self { height, width, rotations, angle_bins_deg, values })
    }

    #[inline]
    pub fn index(&self, v: usize, u: usize, k: usize) -> usize {
        (v * self.width + u) * self.rotations + k
    }
}

/// Log-probabilities over placements; log-sum-exp of all entries is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbPlane {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Log-probabilities over heading bins; log-sum-exp of all entries is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbAngle {
    pub rotations: usize,
    pub angle_bins_deg: Vec<f64>,
    pub values: Vec<f64>,
}

/// An unnormalized blended volume ready for argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVolume {
    pub height: usize,
    pub width: usize,
    pub rotations: usize,
    pub angle_bins_deg: Vec<f64>,
    pub values: Vec<f64>,
}

impl FusedVolume {
    #[inline]
    pub fn index(&self, v: usize, u: usize, k: usize) -> usize {
        (v * self.width + u) * self.rotations + k
    }

    /// Highest-scoring pose; on ties the first entry in (v, u, k) scan
    /// order wins. NaN entries are skipped; an all-NaN volume is degenerate.
    pub fn argmax_pose(&self) -> Result<(Pose, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in self.values.iter().enumerate() {
            if s.is_nan() {
                continue;
            }
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let (i, score) =
            best.ok_or_else(|| Error::Degenerate("no finite score to argmax".into()))?;
        let k = i % self.rotations;
        let u = (i / self.rotations) % self.width;
        let v = i / (self.rotations * self.width);
        Ok((Pose { u, v, theta_deg: self.angle_bins_deg[k] }, score))
    }
}

// ── core operations ─────────────────────────────────────────────────────────

fn log_softmax_values(values: &[f64], stage: &'static str) -> Result<(Vec<f64>, f64)> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { stage });
    }
    let lse = logsumexp(values);
    if !lse.is_finite() {
        return Err(Error::NonFinite { stage });
    }
    Ok((values.iter().map(|v| v - lse).collect(), lse))
}

/// Joint log-softmax of a score volume over every (placement, heading)
/// entry. Out-of-bounds sentinels stay in the pool and end up with
/// vanishing probability; a volume with nothing but sentinels is rejected.
pub fn log_softmax_volume(scores: &ScoreVolume) -> Result<LogProbVolume> {
    let max = scores.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_nan() {
        return Err(Error::NonFinite { stage: "score normalization" });
    }
    if max <= OUT_OF_BOUNDS_SCORE {
        return Err(Error::Degenerate(
            "score volume has no in-bounds placement".into(),
        ));
    }
    let (values, _) = log_softmax_values(&scores.scores, "score normalization")?;
    Ok(LogProbVolume {
        height: scores.height,
        width: scores.width,
        rotations: scores.rotations,
        angle_bins_deg: scores.angle_bins_deg.clone(),
        values,
    })
}

/// Position prior: marginal log-probability per placement (log-sum-exp over
/// heading bins).
pub fn lse_over_theta(vol: &LogProbVolume) -> LogProbPlane {
    let k = vol.rotations;
    let values = vol.values.chunks_exact(k).map(logsumexp).collect();
    LogProbPlane { height: vol.height, width: vol.width, values }
}

/// Heading prior: marginal log-probability per heading bin (log-sum-exp
/// over placements).
pub fn lse_over_xy(vol: &LogProbVolume) -> LogProbAngle {
    let k = vol.rotations;
    let mut maxv = vec![f64::NEG_INFINITY; k];
    for chunk in vol.values.chunks_exact(k) {
        for (m, &v) in maxv.iter_mut().zip(chunk) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut sums = vec![0.0f64; k];
    for chunk in vol.values.chunks_exact(k) {
        for ((s, &m), &v) in sums.iter_mut().zip(&maxv).zip(chunk) {
            if m.is_finite() {
                *s += (v - m).exp();
            }
        }
    }
    let values = maxv
        .iter()
        .zip(&sums)
        .map(|(&m, &s)| if m.is_finite() { m + s.ln() } else { m })
        .collect();
    LogProbAngle { rotations: k, angle_bins_deg: vol.angle_bins_deg.clone(), values }
}

/// Sharpened view scores: `(1−α)·view + α·prior`, the prior broadcast over
/// heading bins.
pub fn blend_position_prior(
    view: &LogProbVolume,
    prior: &LogProbPlane,
    alpha: f64,
) -> Result<Vec<f64>> {
    if view.height != prior.height || view.width != prior.width {
        return Err(Error::Consistency(format!(
            "view volume is {}×{} but the position prior is {}×{}",
            view.height, view.width, prior.height, prior.width
        )));
    }
    let k = view.rotations;
    let mut out = Vec::with_capacity(view.values.len());
    for (chunk, &p) in view.values.chunks_exact(k).zip(&prior.values) {
        for &v in chunk {
            out.push((1.0 - alpha) * v + alpha * p);
        }
    }
    Ok(out)
}

/// Final blended volume: `(1−β)·pano + β·prior`, the prior broadcast over
/// placements.
pub fn blend_heading_prior(
    pano: &LogProbVolume,
    prior: &LogProbAngle,
    beta: f64,
) -> Result<FusedVolume> {
    if pano.rotations != prior.rotations {
        return Err(Error::Consistency(format!(
            "panorama volume has {} heading bins but the prior has {}",
            pano.rotations, prior.rotations
        )));
    }
    let k = pano.rotations;
    let mut values = Vec::with_capacity(pano.values.len());
    for chunk in pano.values.chunks_exact(k) {
        for (&v, &p) in chunk.iter().zip(&prior.values) {
            values.push((1.0 - beta) * v + beta * p);
        }
    }
    Ok(FusedVolume {
        height: pano.height,
        width: pano.width,
        rotations: k,
        angle_bins_deg: pano.angle_bins_deg.clone(),
        values,
    })
}

/// Every intermediate of the full two-stage fusion, kept for training and
/// inspection.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    pub params: FusionParams,
    pub log_p_pano: LogProbVolume,
    pub prior_uv: LogProbPlane,
    pub log_p_view: LogProbVolume,
    /// Sharpened view scores before renormalization.
    pub blended_view: Vec<f64>,
    pub log_p_view_blended: LogProbVolume,
    pub prior_theta: LogProbAngle,
    pub fused: FusedVolume,
}

fn check_same_shape(pano: &ScoreVolume, view: &ScoreVolume) -> Result<()> {
    if pano.height != view.height
        || pano.width != view.width
        || pano.rotations != view.rotations
    {
        return Err(Error::Consistency(format!(
            "panorama volume {}×{}×{} and view volume {}×{}×{} differ in shape",
            pano.height, pano.width, pano.rotations, view.height, view.width, view.rotations
        )));
    }
    if pano.embedding_id != view.embedding_id {
        return Err(Error::Consistency(format!(
            "volumes come from different embeddings (`{}` vs `{}`)",
            pano.embedding_id, view.embedding_id
        )));
    }
    Ok(())
}

/// Runs the full two-stage fusion and returns every intermediate.
pub fn fuse_two_stage(
    pano: &ScoreVolume,
    view: &ScoreVolume,
    params: &FusionParams,
) -> Result<FusionTrace> {
    check_same_shape(pano, view)?;
    let log_p_pano = log_softmax_volume(pano)?;
    let prior_uv = lse_over_theta(&log_p_pano);
    let log_p_view = log_softmax_volume(view)?;
    let blended_view = blend_position_prior(&log_p_view, &prior_uv, params.alpha)?;
    let (norm, _) = log_softmax_values(&blended_view, "view renormalization")?;
    let log_p_view_blended = LogProbVolume {
        height: log_p_view.height,
        width: log_p_view.width,
        rotations: log_p_view.rotations,
        angle_bins_deg: log_p_view.angle_bins_deg.clone(),
        values: norm,
    };
    let prior_theta = lse_over_xy(&log_p_view_blended);
    let fused = blend_heading_prior(&log_p_pano, &prior_theta, params.beta)?;
    Ok(FusionTrace {
        params: *params,
        log_p_pano,
        prior_uv,
        log_p_view,
        blended_view,
        log_p_view_blended,
        prior_theta,
        fused,
    })
}

/// Applies a fusion strategy and returns the volume to argmax.
pub fn fuse(
    pano: &ScoreVolume,
    view: &ScoreVolume,
    params: &FusionParams,
    strategy: FusionStrategy,
) -> Result<FusedVolume> {
    match strategy {
        FusionStrategy::TwoStage => Ok(fuse_two_stage(pano, view, params)?.fused),
        FusionStrategy::PositionPriorOnly => {
            check_same_shape(pano, view)?;
            let log_p_pano = log_softmax_volume(pano)?;
            let prior_uv = lse_over_theta(&log_p_pano);
            let log_p_view = log_softmax_volume(view)?;
            let values = blend_position_prior(&log_p_view, &prior_uv, params.alpha)?;
            Ok(FusedVolume {
                height: view.height,
                width: view.width,
                rotations: view.rotations,
                angle_bins_deg: view.angle_bins_deg.clone(),
                values,
            })
        }
        FusionStrategy::HeadingPriorOnly => {
            check_same_shape(pano, view)?;
            let log_p_pano = log_softmax_volume(pano)?;
            let log_p_view = log_softmax_volume(view)?;
            let prior_theta = lse_over_xy(&log_p_view);
            blend_heading_prior(&log_p_pano, &prior_theta, params.beta)
        }
        FusionStrategy::NoFusion => {
            let log_p_pano = log_softmax_volume(pano)?;
            Ok(FusedVolume {
                height: log_p_pano.height,
                width: log_p_pano.width,
                rotations: log_p_pano.rotations,
                angle_bins_deg: log_p_pano.angle_bins_deg,
                values: log_p_pano.values,
            })
        }
    }
}

/// Shannon entropy in bits of an image's luminance histogram (256 bins over
/// the per-pixel channel mean).
pub fn shannon_entropy(img: &PixelGrid) -> f64 {
    let mut counts = [0u64; 256];
    let c = img.channels;
    for px in img.data.chunks_exact(c) {
        let mean = px.iter().sum::<f64>() / c as f64;
        let bin = (mean * 255.0).round().clamp(0.0, 255.0) as usize;
        counts[bin] += 1;
    }
    let total = (img.width * img.height) as f64;
    counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.log2()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::angle_bins;
    use crate::osm::GeoPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ANCHOR: GeoPoint = GeoPoint { lat_deg: 48.2, lon_deg: 16.37 };

    fn volume(h: usize, w: usize, k: usize, seed: u64) -> ScoreVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = (0..h * w * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        ScoreVolume {
            height: h,
            width: w,
            rotations: k,
            angle_bins_deg: angle_bins(k),
            meters_per_px: 0.5,
            anchor: ANCHOR,
            embedding_id: "test".into(),
            scores,
        }
    }

    /// Straight exp-space reference for the full two-stage pipeline.
    fn oracle_two_stage(pano: &[f64], view: &[f64], hw: usize, k: usize, a: f64, b: f64) -> Vec<f64> {
        let softmax = |s: &[f64]| {
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            s.iter().map(|v| v.exp() / z).collect::<Vec<f64>>()
        };
        let p_pano = softmax(pano);
        let prior_uv: Vec<f64> =
            (0..hw).map(|p| p_pano[p * k..(p + 1) * k].iter().sum::<f64>()).collect();
        let p_view = softmax(view);
        let sharpened: Vec<f64> = (0..hw * k)
            .map(|i| (1.0 - a) * p_view[i].ln() + a * prior_uv[i / k].ln())
            .collect();
        let p_sharp = softmax(&sharpened);
        let prior_theta: Vec<f64> =
            (0..k).map(|kk| (0..hw).map(|p| p_sharp[p * k + kk]).sum::<f64>()).collect();
        (0..hw * k)
            .map(|i| (1.0 - b) * p_pano[i].ln() + b * prior_theta[i % k].ln())
            .collect()
    }

    #[test]
    fn log_softmax_is_normalized_and_shift_invariant() {
        let vol = volume(5, 4, 6, 3);
        let lp = log_softmax_volume(&vol).unwrap();
        assert!(logsumexp(&lp.values).abs() < 1e-12);

        let mut shifted = vol.clone();
        shifted.scores.iter_mut().for_each(|s| *s += 123.456);
        let lp2 = log_softmax_volume(&shifted).unwrap();
        for (a, b) in lp.values.iter().zip(&lp2.values) {
            assert!((a - b).abs() < 1e-12);
        }

        // Marginals of a normalized volume are normalized too.
        assert!(logsumexp(&lse_over_theta(&lp).values).abs() < 1e-12);
        assert!(logsumexp(&lse_over_xy(&lp).values).abs() < 1e-12);
    }

    #[test]
    fn two_stage_fusion_matches_the_exp_space_oracle() {
        for seed in 0..6 {
            let pano = volume(4, 4, 4, seed);
            let view = volume(4, 4, 4, seed + 100);
            let params = FusionParams::new(0.3 + 0.1 * seed as f64 / 6.0, 0.6).unwrap();
            let trace = fuse_two_stage(&pano, &view, &params).unwrap();
            let expect =
                oracle_two_stage(&pano.scores, &view.scores, 16, 4, params.alpha, params.beta);
            for (i, (a, b)) in trace.fused.values.iter().zip(&expect).enumerate() {
                assert!((a - b).abs() < 1e-10, "entry {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_beta_returns_the_panorama_distribution_exactly() {
        let pano = volume(5, 5, 8, 1);
        let view = volume(5, 5, 8, 2);
        let params = FusionParams::new(0.7, 0.0).unwrap();
        let trace = fuse_two_stage(&pano, &view, &params).unwrap();
        assert_eq!(trace.fused.values, trace.log_p_pano.values);
    }

    #[test]
    fn sentinel_scores_get_vanishing_probability() {
        let mut vol = volume(4, 4, 2, 9);
        let idx = vol.index(1, 2, 0);
        vol.scores[idx] = OUT_OF_BOUNDS_SCORE;
        let lp = log_softmax_volume(&vol).unwrap();
        assert!(lp.values[idx] < -1e8);
        assert!(logsumexp(&lp.values).abs() < 1e-12);
    }

    #[test]
    fn all_sentinel_volume_is_degenerate() {
        let mut vol = volume(3, 3, 2, 9);
        vol.scores.iter_mut().for_each(|s| *s = OUT_OF_BOUNDS_SCORE);
        assert!(matches!(log_softmax_volume(&vol), Err(Error::Degenerate(_))));

        let mut nan_vol = volume(3, 3, 2, 9);
        nan_vol.scores[4] = f64::NAN;
        assert!(matches!(
            log_softmax_volume(&nan_vol),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn argmax_takes_the_first_maximum_in_scan_order() {
        let mut fused = FusedVolume {
            height: 2,
            width: 2,
            rotations: 3,
            angle_bins_deg: angle_bins(3),
            values: vec![0.0; 12],
        };
        let (a, b) = (fused.index(0, 1, 2), fused.index(1, 0, 1));
        fused.values[a] = 5.0;
        fused.values[b] = 5.0;
        let (pose, score) = fused.argmax_pose().unwrap();
        assert_eq!((pose.v, pose.u), (0, 1));
        assert_eq!(pose.theta_deg, angle_bins(3)[2]);
        assert_eq!(score, 5.0);

        let origin = fused.index(0, 0, 0);
        fused.values[origin] = f64::NAN;
        let (pose2, _) = fused.argmax_pose().unwrap();
        assert_eq!((pose2.v, pose2.u), (0, 1));

        fused.values.iter_mut().for_each(|v| *v = f64::NAN);
        assert!(matches!(fused.argmax_pose(), Err(Error::Degenerate(_))));
    }

    #[test]
    fn strategies_reduce_to_the_documented_pieces() {
        let pano = volume(4, 4, 4, 21);
        let view = volume(4, 4, 4, 22);
        let params = FusionParams::new(0.4, 0.7).unwrap();

        let none = fuse(&pano, &view, &params, FusionStrategy::NoFusion).unwrap();
        let lp = log_softmax_volume(&pano).unwrap();
        assert_eq!(none.values, lp.values);

        let pos = fuse(&pano, &view, &params, FusionStrategy::PositionPriorOnly).unwrap();
        let expect = blend_position_prior(
            &log_softmax_volume(&view).unwrap(),
            &lse_over_theta(&lp),
            params.alpha,
        )
        .unwrap();
        assert_eq!(pos.values, expect);

        let heading = fuse(&pano, &view, &params, FusionStrategy::HeadingPriorOnly).unwrap();
        let prior = lse_over_xy(&log_softmax_volume(&view).unwrap());
        let expect = blend_heading_prior(&lp, &prior, params.beta).unwrap();
        assert_eq!(heading.values, expect.values);

        // The four strategies genuinely differ on generic volumes.
        let two = fuse(&pano, &view, &params, FusionStrategy::TwoStage).unwrap();
        assert_ne!(two.values, none.values);
        assert_ne!(two.values, pos.values);
        assert_ne!(two.values, heading.values);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            FusionStrategy::TwoStage,
            FusionStrategy::PositionPriorOnly,
            FusionStrategy::HeadingPriorOnly,
            FusionStrategy::NoFusion,
        ] {
            assert_eq!(s.name().parse::<FusionStrategy>().unwrap(), s);
        }
        assert!("bogus".parse::<FusionStrategy>().is_err());
    }

    #[test]
    fn entropy_of_a_half_and_half_image_is_one_bit() {
        let mut img = PixelGrid::zeros(8, 4, 1);
        img.data[..16].iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(shannon_entropy(&img), 1.0);

        let flat = PixelGrid::zeros(5, 5, 3);
        assert_eq!(shannon_entropy(&flat), 0.0);

        // A full 256-level ramp carries 8 bits.
        let mut ramp = PixelGrid::zeros(256, 1, 1);
        for (i, v) in ramp.data.iter_mut().enumerate() {
            *v = i as f64 / 255.0;
        }
        assert!((shannon_entropy(&ramp) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_volume_is_rejected_on_construction() {
        let err = LogProbVolume::new(2, 2, 2, angle_bins(2), vec![-1.0; 8]).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
        let uniform = (8f64).ln();
        assert!(LogProbVolume::new(2, 2, 2, angle_bins(2), vec![-uniform; 8]).is_ok());
    }
}

//! End-to-end localization from a ground panorama to a map pose.
//!
//! The panorama is split into pinhole views, each view is projected onto the
//! camera-centered ground grid, and the merged grid (the full surround
//! template) together with the first view's sector grid (the front template)
//! is correlated against the embedded map over a bank of candidate headings.
//! The two score volumes are fused and the best placement is read off as a
//! pose.

use crate::bev::{
    merge_bevs, min_view_height_for_full_disc, view_to_bev, BevConfig, BevFeature, PixelEmbedding,
};
use crate::embed::NeuralMap;
use crate::error::Result;
use crate::fusion::{fuse, FusedVolume, FusionParams, FusionStrategy, Pose};
use crate::img::EquirectImage;
use crate::matching::{match_fft, ScoreVolume, ROTATIONS_EVAL_DEFAULT};
use crate::pano::pano_to_views;

/// Tuning knobs for [`localize`].
#[derive(Debug, Clone)]
pub struct LocalizeOptions {
    pub bev: BevConfig,
    /// How many pinhole views the panorama is split into.
    pub view_count: usize,
    /// Width of each pinhole view in pixels. The height is derived so that
    /// every ground cell of the range disc projects inside its view.
    pub view_width: usize,
    /// Number of heading bins searched by the matcher.
    pub rotations: usize,
    pub fusion: FusionParams,
    pub strategy: FusionStrategy,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        Self {
            bev: BevConfig::default(),
            view_count: 3,
            view_width: 96,
            rotations: ROTATIONS_EVAL_DEFAULT,
            fusion: FusionParams::default(),
            strategy: FusionStrategy::TwoStage,
        }
    }
}

impl LocalizeOptions {
    /// View height under which the view sectors tile the whole range disc.
    pub fn view_height(&self) -> Result<usize> {
        min_view_height_for_full_disc(&self.bev, 360.0 / self.view_count as f64, self.view_width)
    }
}

/// Matcher and fusion outputs for one query.
#[derive(Debug, Clone)]
pub struct Localization {
    pub pose: Pose,
    /// Fused log-probability of the winning placement.
    pub score: f64,
    /// Scores of the surround template per placement and heading.
    pub pano_scores: ScoreVolume,
    /// Scores of the front-view template per placement and heading.
    pub view_scores: ScoreVolume,
    pub fused: FusedVolume,
}

/// Projects a panorama into the surround ground template and the front-view
/// sector template used for orientation fusion.
pub fn ground_templates(
    pano: &EquirectImage,
    embed: &PixelEmbedding,
    opts: &LocalizeOptions,
) -> Result<(BevFeature, BevFeature)> {
    let height = opts.view_height()?;
    let views = pano_to_views(pano, opts.view_count, opts.view_width, height)?;
    let parts = views.iter().map(|v| view_to_bev(v, embed, &opts.bev)).collect::<Result<Vec<_>>>()?;
    let surround = merge_bevs(&parts)?;
    let front = parts.into_iter().next().expect("view split is non-empty");
    Ok((surround, front))
}

/// [`localize`] on precomputed ground templates; also the entry point for
/// templates produced by other means, such as map-truth renders.
pub fn localize_with_templates(
    surround: &BevFeature,
    front: &BevFeature,
    map: &NeuralMap,
    rotations: usize,
    fusion: &FusionParams,
    strategy: FusionStrategy,
) -> Result<Localization> {
    let pano_scores = match_fft(surround, map, rotations)?;
    let view_scores = match_fft(front, map, rotations)?;
    let fused = fuse(&pano_scores, &view_scores, fusion, strategy)?;
    let (pose, score) = fused.argmax_pose()?;
    Ok(Localization { pose, score, pano_scores, view_scores, fused })
}

/// Full localization: panorama in, map pose out.
///
/// Ties in the fused volume resolve to the first placement in row-major
/// (row, column, heading-bin) scan order.
pub fn localize(
    pano: &EquirectImage,
    embed: &PixelEmbedding,
    map: &NeuralMap,
    opts: &LocalizeOptions,
) -> Result<Localization> {
    let (surround, front) = ground_templates(pano, embed, opts)?;
    localize_with_templates(&surround, &front, map, opts.rotations, &opts.fusion, opts.strategy)
}

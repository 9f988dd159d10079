//! Gradient training of the feature spaces and the fusion weights.
//!
//! Trainable parameters: the map-side class embedding table (background rows
//! pinned to zero), the panorama-side pixel embedding, and the two fusion
//! weights through a sigmoid. The loss is the negative log-likelihood of the
//! ground-truth placement under the fused volume treated as logits over all
//! placements and heading bins. Every step of the forward pass is linear or
//! smooth in the parameters — sampling geometry, rotation resampling and the
//! out-of-bounds rule are parameter-independent — so the backward pass here
//! is exact, and [`grad_check`] validates it end to end against central
//! differences.

use crate::bev::{
    merge_bevs, min_view_height_for_full_disc, rotate_bev_with_plan, rotation_plan,
    view_to_bev_traced, BevConfig, BevFeature, PixelEmbedding, RotationPlan,
};
use crate::embed::{embed_map, EmbeddingTable, NeuralMap};
use crate::error::{Error, Result};
use crate::fusion::{fuse_two_stage, FusionParams, FusionTrace, Pose};
use crate::img::EquirectImage;
use crate::matching::{
    angle_bins, bin_index_for_angle, correlate_direct, support_window, valid_bbox,
    volume_from_planes, ScoreVolume, OUT_OF_BOUNDS_SCORE, ROTATIONS_TRAIN_DEFAULT,
};
use crate::osm::{ClassTable, RasterMap, CHANNELS};
use crate::pano::pano_to_views;
use crate::util::{init_thread_pool_from_env, logsumexp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ── trainable parameters ────────────────────────────────────────────────────

/// Everything gradient descent is allowed to move.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableState {
    /// Map-side class embedding; background rows stay zero.
    pub table: EmbeddingTable,
    /// Panorama-side pixel embedding into the shared feature space.
    pub pixel_embed: PixelEmbedding,
    /// Position-prior weight before the sigmoid.
    pub raw_alpha: f64,
    /// Heading-prior weight before the sigmoid.
    pub raw_beta: f64,
}

impl TrainableState {
    /// Random initialization of both feature spaces from one seed; the raw
    /// fusion weights start at zero, i.e. at the sigmoid midpoint 0.5.
    pub fn init(classes: &ClassTable, dim: usize, pano_channels: usize, seed: u64) -> Result<Self> {
        if dim == 0 || pano_channels == 0 {
            return Err(Error::Input(
                "embedding dimension and panorama channel count must be positive".into(),
            ));
        }
        let table = EmbeddingTable::random(classes, dim, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x517c_c1b7_2722_0a95));
        let scale = (1.0 / pano_channels as f64).sqrt();
        let pixel_embed = PixelEmbedding::random(&mut rng, pano_channels, dim, scale);
        Ok(Self { table, pixel_embed, raw_alpha: 0.0, raw_beta: 0.0 })
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams { alpha: sigmoid(self.raw_alpha), beta: sigmoid(self.raw_beta) }
    }

    /// Number of trainable scalars (background rows excluded).
    pub fn param_count(&self) -> usize {
        let table: usize = (0..CHANNELS)
            .map(|ch| (self.table.class_names[ch].len() - 1) * self.table.dim)
            .sum();
        table + self.pixel_embed.weight.len() + self.pixel_embed.bias.len() + 2
    }

    /// In-place gradient step `p ← p − lr·g`. Background rows never move.
    pub fn step(&mut self, g: &Gradients, lr: f64) {
        let dim = self.table.dim;
        for ch in 0..CHANNELS {
            for (i, gv) in g.table[ch].iter().enumerate() {
                if i >= dim {
                    self.table.vectors[ch][i] -= lr * gv;
                }
            }
        }
        for (wv, gv) in self.pixel_embed.weight.iter_mut().zip(&g.weight) {
            *wv -= lr * gv;
        }
        for (bv, gv) in self.pixel_embed.bias.iter_mut().zip(&g.bias) {
            *bv -= lr * gv;
        }
        self.raw_alpha -= lr * g.raw_alpha;
        self.raw_beta -= lr * g.raw_beta;
    }
}

/// Loss gradient in the same layout as [`TrainableState`]. Background-row
/// entries are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub table: [Vec<f64>; CHANNELS],
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub raw_alpha: f64,
    pub raw_beta: f64,
}

impl Gradients {
    pub fn zeros_like(state: &TrainableState) -> Self {
        Self {
            table: std::array::from_fn(|ch| vec![0.0; state.table.vectors[ch].len()]),
            weight: vec![0.0; state.pixel_embed.weight.len()],
            bias: vec![0.0; state.pixel_embed.bias.len()],
            raw_alpha: 0.0,
            raw_beta: 0.0,
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for ch in 0..CHANNELS {
            for (a, b) in self.table[ch].iter_mut().zip(&other.table[ch]) {
                *a += b;
            }
        }
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        self.raw_alpha += other.raw_alpha;
        self.raw_beta += other.raw_beta;
    }

    pub fn scale(&mut self, s: f64) {
        for ch in 0..CHANNELS {
            for a in self.table[ch].iter_mut() {
                *a *= s;
            }
        }
        for a in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *a *= s;
        }
        self.raw_alpha *= s;
        self.raw_beta *= s;
    }

    pub fn max_abs(&self) -> f64 {
        self.table
            .iter()
            .flatten()
            .chain(&self.weight)
            .chain(&self.bias)
            .chain([&self.raw_alpha, &self.raw_beta])
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    fn is_finite(&self) -> bool {
        self.table.iter().flatten().chain(&self.weight).chain(&self.bias).all(|v| v.is_finite())
            && self.raw_alpha.is_finite()
            && self.raw_beta.is_finite()
    }
}

// ── training pipeline geometry ──────────────────────────────────────────────

/// Pipeline shape, fixed for a training run.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub bev: BevConfig,
    pub view_count: usize,
    pub view_width: usize,
    /// Heading bins searched during training.
    pub rotations: usize,
}

impl Default for TrainSetup {
    fn default() -> Self {
        Self {
            bev: BevConfig::default(),
            view_count: 3,
            view_width: 96,
            rotations: ROTATIONS_TRAIN_DEFAULT,
        }
    }
}

/// One training example: a panorama, the class raster of its scene, and the
/// true pose.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub pano: EquirectImage,
    pub raster: RasterMap,
    pub gt: Pose,
}

/// Raw (pre-embedding) pixel features of one view's ground cells. Sampling
/// geometry does not depend on the parameters, so these are extracted once.
struct PartTrace {
    /// Valid cells in scan order.
    cells: Vec<usize>,
    /// `cells.len() × in_channels`, cell-major.
    raw: Vec<f64>,
}

struct PreparedSample {
    raster: RasterMap,
    parts: Vec<PartTrace>,
    gt: Pose,
    gt_bin: usize,
}

/// Parameter-independent geometry of one template shape.
struct TemplateGeom {
    mask: Vec<bool>,
    plans: Vec<RotationPlan>,
}

/// Everything the forward pass produced for one sample, kept for backward.
struct Forward {
    map: NeuralMap,
    rt_surround: Vec<BevFeature>,
    rt_front: Vec<BevFeature>,
    s_pano: ScoreVolume,
    s_view: ScoreVolume,
    trace: FusionTrace,
    gt_idx: usize,
    loss: f64,
}

/// Precomputed sampling geometry plus the training set.
pub struct Trainer {
    setup: TrainSetup,
    in_channels: usize,
    bins: Vec<f64>,
    /// Which view part claims each surround-template cell.
    owner: Vec<Option<u8>>,
    surround: TemplateGeom,
    front: TemplateGeom,
    samples: Vec<PreparedSample>,
}

impl Trainer {
    pub fn new(setup: TrainSetup, samples: &[TrainingSample]) -> Result<Self> {
        init_thread_pool_from_env();
        setup.bev.validate()?;
        if setup.rotations == 0 {
            return Err(Error::Input("rotation bin count must be positive".into()));
        }
        let first = samples
            .first()
            .ok_or_else(|| Error::Input("training needs at least one sample".into()))?;
        let in_channels = first.pano.pixels.channels;
        let view_h =
            min_view_height_for_full_disc(&setup.bev, 360.0 / setup.view_count as f64, setup.view_width)?;
        let ident = PixelEmbedding::identity(in_channels);
        let g = setup.bev.grid_size;
        let gg = g * g;

        // Template masks and the part owning each surround cell, from the
        // first sample's geometry (identical for all samples by construction,
        // verified below).
        let probe = pano_to_views(&first.pano, setup.view_count, setup.view_width, view_h)?;
        let probe_parts = probe
            .iter()
            .map(|v| view_to_bev_traced(v, &ident, &setup.bev))
            .collect::<Result<Vec<_>>>()?;
        let probe_bevs: Vec<&BevFeature> = probe_parts.iter().map(|(b, _)| b).collect();
        let merged = merge_bevs(&probe_parts.iter().map(|(b, _)| b.clone()).collect::<Vec<_>>())?;
        let mut owner = vec![None; gg];
        for (cell, o) in owner.iter_mut().enumerate() {
            *o = probe_bevs.iter().position(|b| b.mask[cell]).map(|p| p as u8);
        }
        let part_masks: Vec<Vec<bool>> = probe_bevs.iter().map(|b| b.mask.clone()).collect();

        let bins = angle_bins(setup.rotations);
        let build_geom = |mask: &Vec<bool>, what: &str| -> Result<TemplateGeom> {
            let plans: Vec<RotationPlan> =
                bins.par_iter().map(|&a| rotation_plan(g, a)).collect();
            for (k, plan) in plans.iter().enumerate() {
                let alive = plan
                    .cells
                    .iter()
                    .any(|e| e.as_ref().is_some_and(|pc| mask[pc.nearest]));
                if !alive {
                    return Err(Error::Degenerate(format!(
                        "{what} template loses all valid cells when rotated to {:.3}°",
                        bins[k]
                    )));
                }
            }
            Ok(TemplateGeom { mask: mask.clone(), plans })
        };
        let surround = build_geom(&merged.mask, "surround")?;
        let front = build_geom(&part_masks[0], "front")?;

        let mut prepared = Vec::with_capacity(samples.len());
        for (si, s) in samples.iter().enumerate() {
            if s.pano.pixels.channels != in_channels {
                return Err(Error::Input(format!(
                    "sample {si} has {} panorama channels, sample 0 has {in_channels}",
                    s.pano.pixels.channels
                )));
            }
            let views = pano_to_views(&s.pano, setup.view_count, setup.view_width, view_h)?;
            let mut parts = Vec::with_capacity(views.len());
            for (p, view) in views.iter().enumerate() {
                let (bev, taps) = view_to_bev_traced(view, &ident, &setup.bev)?;
                if bev.mask != part_masks[p] {
                    return Err(Error::Consistency(format!(
                        "sample {si} view {p} produced an unexpected ground mask"
                    )));
                }
                let cells: Vec<usize> = taps.iter().map(|t| t.cell).collect();
                let mut raw = vec![0.0; cells.len() * in_channels];
                for (m, &cell) in cells.iter().enumerate() {
                    for c in 0..in_channels {
                        raw[m * in_channels + c] = bev.values[c * gg + cell];
                    }
                }
                parts.push(PartTrace { cells, raw });
            }
            // The true placement must have full template support on the map
            // at its heading bin, or its fused log-probability is the
            // out-of-bounds sentinel and the loss is meaningless.
            let gt_bin = bin_index_for_angle(s.gt.theta_deg, setup.rotations);
            let ct = (g - 1) / 2;
            let (h, w) = (s.raster.height, s.raster.width);
            let rot_mask = rotated_mask(&surround.plans[gt_bin], &surround.mask, g);
            let probe_bbox = mask_bbox(&rot_mask, g);
            let in_bounds = support_window(h, w, ct, probe_bbox).is_some_and(
                |(v_lo, v_hi, u_lo, u_hi)| {
                    (v_lo..=v_hi).contains(&s.gt.v) && (u_lo..=u_hi).contains(&s.gt.u)
                },
            );
            if !in_bounds {
                return Err(Error::Input(format!(
                    "sample {si}: pose ({}, {}) is too close to the {w}×{h} map border for the \
                     template to fit",
                    s.gt.u, s.gt.v
                )));
            }
            prepared.push(PreparedSample { raster: s.raster.clone(), parts, gt: s.gt, gt_bin });
        }

        Ok(Self { setup, in_channels, bins, owner, surround, front, samples: prepared })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn gt_pose(&self, idx: usize) -> &Pose {
        &self.samples[idx].gt
    }

    /// Embeds one sample's templates under `state` and scores them against
    /// its embedded map: `(surround volume, front-view volume)`. Matches the
    /// exhaustive matcher bit for bit.
    pub fn score_volumes(
        &self,
        state: &TrainableState,
        idx: usize,
    ) -> Result<(ScoreVolume, ScoreVolume)> {
        let fwd = self.forward(state, idx)?;
        Ok((fwd.s_pano, fwd.s_view))
    }

    /// Negative log-likelihood of the true placement for one sample.
    pub fn loss(&self, state: &TrainableState, idx: usize) -> Result<f64> {
        Ok(self.forward(state, idx)?.loss)
    }

    fn forward(&self, state: &TrainableState, idx: usize) -> Result<Forward> {
        let sample = &self.samples[idx];
        let g = self.setup.bev.grid_size;
        let gg = g * g;
        let cin = self.in_channels;
        let cout = state.pixel_embed.out_channels;
        if state.pixel_embed.in_channels != cin {
            return Err(Error::Input(format!(
                "pixel embedding expects {} channels, panoramas have {cin}",
                state.pixel_embed.in_channels
            )));
        }
        if cout != state.table.dim {
            return Err(Error::Input(format!(
                "pixel embedding produces {cout} channels but the class table embeds into {}",
                state.table.dim
            )));
        }
        let map = embed_map(&sample.raster, &state.table)?;

        // Embed the traced raw features into the two templates.
        let mpc = self.setup.bev.meters_per_cell;
        let mut surround = BevFeature::zeros(g, cout, mpc);
        surround.mask = self.surround.mask.clone();
        let mut front = BevFeature::zeros(g, cout, mpc);
        front.mask = self.front.mask.clone();
        let mut feat = vec![0.0; cout];
        for (p, part) in sample.parts.iter().enumerate() {
            for (m, &cell) in part.cells.iter().enumerate() {
                state.pixel_embed.apply(&part.raw[m * cin..(m + 1) * cin], &mut feat);
                if self.owner[cell] == Some(p as u8) {
                    for (c, &f) in feat.iter().enumerate() {
                        surround.values[c * gg + cell] = f;
                    }
                }
                if p == 0 {
                    for (c, &f) in feat.iter().enumerate() {
                        front.values[c * gg + cell] = f;
                    }
                }
            }
        }

        let (s_pano, rt_surround) = self.score_template(&surround, &self.surround, &map);
        let (s_view, rt_front) = self.score_template(&front, &self.front, &map);
        let params = state.fusion_params();
        let trace = fuse_two_stage(&s_pano, &s_view, &params)?;
        let k = self.setup.rotations;
        let gt_idx = (sample.gt.v * map.width + sample.gt.u) * k + sample.gt_bin;
        debug_assert!(s_pano.scores[gt_idx] != OUT_OF_BOUNDS_SCORE);
        let loss = logsumexp(&trace.fused.values) - trace.fused.values[gt_idx];
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: "training loss" });
        }
        Ok(Forward { map, rt_surround, rt_front, s_pano, s_view, trace, gt_idx, loss })
    }

    fn score_template(
        &self,
        template: &BevFeature,
        geom: &TemplateGeom,
        map: &NeuralMap,
    ) -> (ScoreVolume, Vec<BevFeature>) {
        let (rts, planes): (Vec<_>, Vec<_>) = geom
            .plans
            .par_iter()
            .map(|plan| {
                let rt = rotate_bev_with_plan(template, plan);
                let plane = correlate_direct(&rt, map);
                (rt, plane)
            })
            .unzip();
        (volume_from_planes(map, self.bins.clone(), planes), rts)
    }

    /// Loss plus its exact gradient for one sample.
    pub fn loss_and_gradients(
        &self,
        state: &TrainableState,
        idx: usize,
    ) -> Result<(f64, Gradients)> {
        let fwd = self.forward(state, idx)?;
        let sample = &self.samples[idx];
        let k = self.setup.rotations;
        let (h, w) = (fwd.s_pano.height, fwd.s_pano.width);
        let n = h * w * k;
        let params = state.fusion_params();
        let (alpha, beta) = (params.alpha, params.beta);
        let tr = &fwd.trace;

        // Loss = lse(fused) − fused[gt], so dL/dfused is the softmax of the
        // fused volume minus a one-hot at the true placement.
        let lse_f = logsumexp(&tr.fused.values);
        let mut g_fused: Vec<f64> = tr.fused.values.iter().map(|&x| (x - lse_f).exp()).collect();
        g_fused[fwd.gt_idx] -= 1.0;

        // fused = (1−β)·logP_pano + β·prior_θ (prior broadcast over placements).
        let mut g_logp_pano: Vec<f64> = g_fused.iter().map(|gf| gf * (1.0 - beta)).collect();
        let mut g_prior_theta = vec![0.0; k];
        let mut g_beta = 0.0;
        for (i, &gf) in g_fused.iter().enumerate() {
            let kk = i % k;
            g_prior_theta[kk] += beta * gf;
            g_beta += gf * (tr.prior_theta.values[kk] - tr.log_p_pano.values[i]);
        }

        // prior_θ = lse over placements of the renormalized view volume.
        let mut g_logp1p = vec![0.0; n];
        for (i, gv) in g_logp1p.iter_mut().enumerate() {
            let kk = i % k;
            *gv = g_prior_theta[kk]
                * (tr.log_p_view_blended.values[i] - tr.prior_theta.values[kk]).exp();
        }

        // Renormalization of the sharpened view volume.
        let g_s1p = log_softmax_backward(&g_logp1p, &tr.log_p_view_blended.values);

        // Sharpening: S₁' = (1−α)·logP₁ + α·prior_uv (prior broadcast over bins).
        let g_logp1: Vec<f64> = g_s1p.iter().map(|gv| gv * (1.0 - alpha)).collect();
        let mut g_prior_uv = vec![0.0; h * w];
        let mut g_alpha = 0.0;
        for (i, &gv) in g_s1p.iter().enumerate() {
            let p = i / k;
            g_prior_uv[p] += alpha * gv;
            g_alpha += gv * (tr.prior_uv.values[p] - tr.log_p_view.values[i]);
        }

        // View normalization.
        let mut g_s1 = log_softmax_backward(&g_logp1, &tr.log_p_view.values);

        // prior_uv = lse over bins of the panorama volume.
        for (i, gv) in g_logp_pano.iter_mut().enumerate() {
            let p = i / k;
            *gv +=
                g_prior_uv[p] * (tr.log_p_pano.values[i] - tr.prior_uv.values[p]).exp();
        }

        // Panorama normalization.
        let mut g_spano = log_softmax_backward(&g_logp_pano, &tr.log_p_pano.values);

        // Out-of-bounds scores are assigned constants, not computed from the
        // templates; their gradient is structurally zero.
        for (gs, &s) in g_spano.iter_mut().zip(&fwd.s_pano.scores) {
            if s == OUT_OF_BOUNDS_SCORE {
                *gs = 0.0;
            }
        }
        for (gs, &s) in g_s1.iter_mut().zip(&fwd.s_view.scores) {
            if s == OUT_OF_BOUNDS_SCORE {
                *gs = 0.0;
            }
        }

        // Both matches backpropagate into the map and their template.
        let mut g_map = vec![0.0; fwd.map.values.len()];
        let g_t_surround =
            self.match_backward(&fwd.rt_surround, &self.surround, &fwd.map, &g_spano, &mut g_map);
        let g_t_front =
            self.match_backward(&fwd.rt_front, &self.front, &fwd.map, &g_s1, &mut g_map);

        // Templates → pixel embedding. The surround template reads each cell
        // from its owning view part; the front template reads part 0 again.
        let g = self.setup.bev.grid_size;
        let gg = g * g;
        let cin = self.in_channels;
        let cout = fwd.map.channels;
        let mut g_weight = vec![0.0; cout * cin];
        let mut g_bias = vec![0.0; cout];
        let mut gv = vec![0.0; cout];
        for (p, part) in sample.parts.iter().enumerate() {
            for (m, &cell) in part.cells.iter().enumerate() {
                gv.iter_mut().for_each(|v| *v = 0.0);
                if self.owner[cell] == Some(p as u8) {
                    for (c, v) in gv.iter_mut().enumerate() {
                        *v += g_t_surround[c * gg + cell];
                    }
                }
                if p == 0 {
                    for (c, v) in gv.iter_mut().enumerate() {
                        *v += g_t_front[c * gg + cell];
                    }
                }
                let raw = &part.raw[m * cin..(m + 1) * cin];
                for (c, &gc) in gv.iter().enumerate() {
                    if gc == 0.0 {
                        continue;
                    }
                    g_bias[c] += gc;
                    for (q, &r) in raw.iter().enumerate() {
                        g_weight[c * cin + q] += gc * r;
                    }
                }
            }
        }

        // Map → class table rows (class 0 contributes nothing and stays
        // frozen).
        let dim = state.table.dim;
        let (mh, mw) = (fwd.map.height, fwd.map.width);
        let mut g_table: [Vec<f64>; CHANNELS] =
            std::array::from_fn(|ch| vec![0.0; state.table.vectors[ch].len()]);
        for ch in 0..CHANNELS {
            for y in 0..mh {
                for x in 0..mw {
                    let class = sample.raster.class_at(ch, y, x) as usize;
                    if class == 0 {
                        continue;
                    }
                    for c in 0..dim {
                        g_table[ch][class * dim + c] += g_map[(c * mh + y) * mw + x];
                    }
                }
            }
        }

        let grads = Gradients {
            table: g_table,
            weight: g_weight,
            bias: g_bias,
            raw_alpha: g_alpha * alpha * (1.0 - alpha),
            raw_beta: g_beta * beta * (1.0 - beta),
        };
        Ok((fwd.loss, grads))
    }

    /// Backward through one match: distributes the score gradient onto the
    /// rotated templates (then through the rotation onto the template) and
    /// onto the map. `g_s` holds zeros at out-of-bounds placements.
    fn match_backward(
        &self,
        rts: &[BevFeature],
        geom: &TemplateGeom,
        map: &NeuralMap,
        g_s: &[f64],
        g_map: &mut [f64],
    ) -> Vec<f64> {
        let g = self.setup.bev.grid_size;
        let gg = g * g;
        let ct = (g - 1) / 2;
        let (h, w) = (map.height, map.width);
        let k = rts.len();
        let c_dim = map.channels;

        let per_k: Vec<(Vec<f64>, Vec<f64>)> = (0..k)
            .into_par_iter()
            .map(|kk| {
                let rt = &rts[kk];
                let mut g_t = vec![0.0; c_dim * gg];
                let mut g_m = vec![0.0; c_dim * h * w];
                let n_k = rt.valid_count() as f64;
                let Some((v_lo, v_hi, u_lo, u_hi)) = support_window(h, w, ct, valid_bbox(rt))
                else {
                    return (g_t, g_m);
                };
                // Score gradient plane for this bin, with the 1/N_k of the
                // forward mean folded in.
                let mut gp = vec![0.0; h * w];
                for (p, gv) in gp.iter_mut().enumerate() {
                    *gv = g_s[p * k + kk] / n_k;
                }
                // d score / d template cell is a correlation of the gradient
                // plane with the map; d score / d map pixel scatters the
                // template back over every placement.
                let mut g_rt = vec![0.0; c_dim * gg];
                for i in 0..g {
                    for j in 0..g {
                        if !rt.mask[i * g + j] {
                            continue;
                        }
                        let dy = i as isize - ct as isize;
                        let dx = j as isize - ct as isize;
                        for c in 0..c_dim {
                            let t = rt.values[c * gg + i * g + j];
                            let mut acc = 0.0;
                            for v in v_lo..=v_hi {
                                let my = (v as isize + dy) as usize;
                                let mx0 = (u_lo as isize + dx) as usize;
                                let map_row = &map.values[(c * h + my) * w + mx0..];
                                let g_row = &mut g_m[(c * h + my) * w + mx0..];
                                let gp_row = &gp[v * w + u_lo..v * w + u_hi + 1];
                                for (u, &gpv) in gp_row.iter().enumerate() {
                                    acc += gpv * map_row[u];
                                    g_row[u] += gpv * t;
                                }
                            }
                            g_rt[c * gg + i * g + j] = acc;
                        }
                    }
                }
                // Transpose of the rotation resampling.
                for (out, entry) in geom.plans[kk].cells.iter().enumerate() {
                    let Some(pc) = entry else { continue };
                    if !geom.mask[pc.nearest] {
                        continue;
                    }
                    for c in 0..c_dim {
                        let gout = g_rt[c * gg + out];
                        if gout == 0.0 {
                            continue;
                        }
                        for &(src, wt) in &pc.taps {
                            g_t[c * gg + src] += wt * gout;
                        }
                    }
                }
                (g_t, g_m)
            })
            .collect();

        // Deterministic reduction in bin order.
        let mut g_t_total = vec![0.0; c_dim * gg];
        for (g_t, g_m) in &per_k {
            for (a, b) in g_t_total.iter_mut().zip(g_t) {
                *a += b;
            }
            for (a, b) in g_map.iter_mut().zip(g_m) {
                *a += b;
            }
        }
        g_t_total
    }
}

fn rotated_mask(plan: &RotationPlan, mask: &[bool], g: usize) -> Vec<bool> {
    let mut out = vec![false; g * g];
    for (cell, entry) in plan.cells.iter().enumerate() {
        if let Some(pc) = entry {
            out[cell] = mask[pc.nearest];
        }
    }
    out
}

fn mask_bbox(mask: &[bool], g: usize) -> (usize, usize, usize, usize) {
    let (mut i0, mut i1, mut j0, mut j1) = (g, 0usize, g, 0usize);
    for i in 0..g {
        for j in 0..g {
            if mask[i * g + j] {
                i0 = i0.min(i);
                i1 = i1.max(i);
                j0 = j0.min(j);
                j1 = j1.max(j);
            }
        }
    }
    (i0, i1, j0, j1)
}

/// Gradient of `y = x − lse(x)` given `dL/dy` and the outputs `y`.
fn log_softmax_backward(g_y: &[f64], log_p: &[f64]) -> Vec<f64> {
    let total: f64 = g_y.iter().sum();
    g_y.iter().zip(log_p).map(|(g, lp)| g - lp.exp() * total).collect()
}

// ── gradient checking ───────────────────────────────────────────────────────

/// Address of one trainable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Table { channel: usize, index: usize },
    Weight(usize),
    Bias(usize),
    Alpha,
    Beta,
}

impl ParamSlot {
    fn get(&self, s: &TrainableState) -> f64 {
        match *self {
            Self::Table { channel, index } => s.table.vectors[channel][index],
            Self::Weight(i) => s.pixel_embed.weight[i],
            Self::Bias(i) => s.pixel_embed.bias[i],
            Self::Alpha => s.raw_alpha,
            Self::Beta => s.raw_beta,
        }
    }

    fn set(&self, s: &mut TrainableState, v: f64) {
        match *self {
            Self::Table { channel, index } => s.table.vectors[channel][index] = v,
            Self::Weight(i) => s.pixel_embed.weight[i] = v,
            Self::Bias(i) => s.pixel_embed.bias[i] = v,
            Self::Alpha => s.raw_alpha = v,
            Self::Beta => s.raw_beta = v,
        }
    }

    fn grad(&self, g: &Gradients) -> f64 {
        match *self {
            Self::Table { channel, index } => g.table[channel][index],
            Self::Weight(i) => g.weight[i],
            Self::Bias(i) => g.bias[i],
            Self::Alpha => g.raw_alpha,
            Self::Beta => g.raw_beta,
        }
    }
}

impl std::fmt::Display for ParamSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Self::Table { channel, index } => write!(f, "table[{channel}][{index}]"),
            Self::Weight(i) => write!(f, "weight[{i}]"),
            Self::Bias(i) => write!(f, "bias[{i}]"),
            Self::Alpha => write!(f, "raw_alpha"),
            Self::Beta => write!(f, "raw_beta"),
        }
    }
}

/// All trainable scalars of a state, background rows excluded.
pub fn param_slots(state: &TrainableState) -> Vec<ParamSlot> {
    let mut slots = Vec::with_capacity(state.param_count());
    let dim = state.table.dim;
    for ch in 0..CHANNELS {
        for index in dim..state.table.vectors[ch].len() {
            slots.push(ParamSlot::Table { channel: ch, index });
        }
    }
    for i in 0..state.pixel_embed.weight.len() {
        slots.push(ParamSlot::Weight(i));
    }
    for i in 0..state.pixel_embed.bias.len() {
        slots.push(ParamSlot::Bias(i));
    }
    slots.push(ParamSlot::Alpha);
    slots.push(ParamSlot::Beta);
    slots
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest relative disagreement between analytic and central-difference
    /// gradients.
    pub worst_rel: f64,
    pub worst: Option<ParamSlot>,
}

/// Central-difference check of [`Trainer::loss_and_gradients`] over every
/// trainable scalar: relative error `|a−n| / max(1e−6, |a|, |n|)`.
pub fn grad_check(
    trainer: &Trainer,
    state: &TrainableState,
    sample: usize,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = trainer.loss_and_gradients(state, sample)?;
    let mut report = GradCheckReport { checked: 0, worst_rel: 0.0, worst: None };
    let mut probe = state.clone();
    for slot in param_slots(state) {
        let v = slot.get(state);
        slot.set(&mut probe, v + epsilon);
        let up = trainer.loss(&probe, sample)?;
        slot.set(&mut probe, v - epsilon);
        let down = trainer.loss(&probe, sample)?;
        slot.set(&mut probe, v);
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = slot.grad(&grads);
        let rel = (analytic - numeric).abs() / 1e-6f64.max(analytic.abs()).max(numeric.abs());
        report.checked += 1;
        if rel > report.worst_rel {
            report.worst_rel = rel;
            report.worst = Some(slot);
        }
    }
    Ok(report)
}

// ── training loop ───────────────────────────────────────────────────────────

/// Plateau learning-rate schedule: after `patience` epochs without the loss
/// improving by more than `min_improvement`, the rate is multiplied by
/// `factor` and the count restarts.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    patience: usize,
    factor: f64,
    min_improvement: f64,
    best: f64,
    streak: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, factor: f64, min_improvement: f64) -> Self {
        Self { lr, patience, factor, min_improvement, best: f64::INFINITY, streak: 0 }
    }

    /// Rate in effect for the next epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation loss; returns whether it improved on the
    /// best seen so far.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_improvement {
            self.best = loss;
            self.streak = 0;
            return true;
        }
        self.streak += 1;
        if self.streak >= self.patience {
            self.lr *= self.factor;
            self.streak = 0;
        }
        false
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without improvement before the learning rate drops.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Loss decrease below this does not count as improvement.
    pub min_improvement: f64,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.05,
            plateau_patience: 3,
            plateau_factor: 0.5,
            min_improvement: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State of the best epoch by validation loss.
    pub state: TrainableState,
    /// State after the final epoch.
    pub final_state: TrainableState,
    /// Mean training loss per epoch, which doubles as the validation loss.
    pub loss_trace: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub lr_trace: Vec<f64>,
    pub best_epoch: usize,
}

/// Plain batch gradient descent with shuffled batches, batch-mean gradients
/// and a plateau schedule. Bit-deterministic for a given seed and thread-pool
/// independent: per-sample work runs in parallel but every reduction is
/// ordered.
pub fn train(trainer: &Trainer, init: &TrainableState, opts: &TrainOptions) -> Result<TrainOutcome> {
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::Input("epoch count and batch size must be positive".into()));
    }
    if !(opts.learning_rate > 0.0) || !opts.learning_rate.is_finite() {
        return Err(Error::Input("learning rate must be positive and finite".into()));
    }
    if !(0.0 < opts.plateau_factor && opts.plateau_factor <= 1.0) || opts.plateau_patience == 0 {
        return Err(Error::Input(
            "plateau factor must lie in (0, 1] and patience must be positive".into(),
        ));
    }
    let n = trainer.sample_count();
    let mut state = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut schedule = PlateauSchedule::new(
        opts.learning_rate,
        opts.plateau_patience,
        opts.plateau_factor,
        opts.min_improvement,
    );
    let mut loss_trace = Vec::with_capacity(opts.epochs);
    let mut lr_trace = Vec::with_capacity(opts.epochs);
    let mut best_state = state.clone();
    let mut best_epoch = 0;

    for epoch in 0..opts.epochs {
        let lr = schedule.lr();
        lr_trace.push(lr);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let results: Vec<Result<(f64, Gradients)>> =
                batch.par_iter().map(|&i| trainer.loss_and_gradients(&state, i)).collect();
            let mut acc = Gradients::zeros_like(&state);
            for r in results {
                let (loss, grads) = r.map_err(|e| match e {
                    Error::NonFinite { stage } => Error::Training {
                        epoch,
                        msg: format!("diverged: non-finite {stage}"),
                    },
                    other => other,
                })?;
                loss_sum += loss;
                acc.add(&grads);
            }
            acc.scale(1.0 / batch.len() as f64);
            if !acc.is_finite() {
                return Err(Error::Training { epoch, msg: "diverged: non-finite gradient".into() });
            }
            state.step(&acc, lr);
        }
        let epoch_loss = loss_sum / n as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Training { epoch, msg: "diverged: non-finite loss".into() });
        }
        loss_trace.push(epoch_loss);
        if schedule.observe(epoch_loss) {
            best_state = state.clone();
            best_epoch = epoch;
        }
    }

    Ok(TrainOutcome { state: best_state, final_state: state, loss_trace, lr_trace, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::match_exhaustive;
    use crate::pipeline::{ground_templates, LocalizeOptions};
    use crate::synth::{render_scene_panorama, synth_scene, SceneParams};

    fn tiny_setup() -> TrainSetup {
        TrainSetup {
            bev: BevConfig {
                grid_size: 9,
                meters_per_cell: 0.5,
                camera_height_m: 1.2,
                max_range_m: 2.0,
            },
            view_count: 3,
            view_width: 24,
            rotations: 4,
        }
    }

    fn tiny_samples(count: usize, seed: u64) -> Vec<TrainingSample> {
        (0..count)
            .map(|i| {
                let scene = synth_scene(&SceneParams {
                    extent_m: 12.0,
                    road_spacing_m: 5.0,
                    building_density: 0.8,
                    point_density: 1.5,
                    pose_count: 1,
                    pose_margin_m: 3.0,
                    seed: seed + i as u64,
                    ..SceneParams::default()
                })
                .unwrap();
                let gt = scene.gt_poses[0];
                let pano = render_scene_panorama(&scene.raster, &gt, 64, 1.2).unwrap();
                TrainingSample { pano, raster: scene.raster, gt }
            })
            .collect()
    }

    #[test]
    fn training_scores_match_the_reference_matcher() {
        let setup = tiny_setup();
        let samples = tiny_samples(1, 40);
        let trainer = Trainer::new(setup.clone(), &samples).unwrap();
        let state = TrainableState::init(&ClassTable::default_table(), 3, 3, 7).unwrap();
        let (s_pano, s_view) = trainer.score_volumes(&state, 0).unwrap();

        let map = embed_map(&samples[0].raster, &state.table).unwrap();
        let opts = LocalizeOptions {
            bev: setup.bev.clone(),
            view_count: setup.view_count,
            view_width: setup.view_width,
            ..LocalizeOptions::default()
        };
        let (surround, front) =
            ground_templates(&samples[0].pano, &state.pixel_embed, &opts).unwrap();
        let ref_pano = match_exhaustive(&surround, &map, setup.rotations).unwrap();
        let ref_view = match_exhaustive(&front, &map, setup.rotations).unwrap();
        assert_eq!(s_pano.scores, ref_pano.scores);
        assert_eq!(s_view.scores, ref_view.scores);
    }

    #[test]
    fn gradients_match_central_differences() {
        let trainer = Trainer::new(tiny_setup(), &tiny_samples(1, 17)).unwrap();
        let state = TrainableState::init(&ClassTable::default_table(), 2, 3, 3).unwrap();
        let report = grad_check(&trainer, &state, 0, 1e-4).unwrap();
        assert_eq!(report.checked, state.param_count());
        assert!(
            report.worst_rel < 1e-5,
            "worst {} at {}",
            report.worst_rel,
            report.worst.map(|s| s.to_string()).unwrap_or_default()
        );
    }

    #[test]
    fn a_descent_step_reduces_the_loss() {
        let trainer = Trainer::new(tiny_setup(), &tiny_samples(1, 23)).unwrap();
        let mut state = TrainableState::init(&ClassTable::default_table(), 2, 3, 9).unwrap();
        let (before, grads) = trainer.loss_and_gradients(&state, 0).unwrap();
        state.step(&grads, 1e-3);
        let after = trainer.loss(&state, 0).unwrap();
        assert!(after < before, "loss went {before} → {after}");
    }

    #[test]
    fn training_is_deterministic_and_tracks_the_best_state() {
        let samples = tiny_samples(3, 60);
        let trainer = Trainer::new(tiny_setup(), &samples).unwrap();
        let init = TrainableState::init(&ClassTable::default_table(), 2, 3, 1).unwrap();
        let opts = TrainOptions {
            epochs: 5,
            batch_size: 2,
            learning_rate: 0.02,
            seed: 3,
            ..TrainOptions::default()
        };
        let a = train(&trainer, &init, &opts).unwrap();
        let b = train(&trainer, &init, &opts).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.lr_trace, b.lr_trace);
        assert_eq!(a.state, b.state);

        // The best epoch holds the lowest loss of the trace.
        let min = a.loss_trace.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(a.loss_trace[a.best_epoch] <= min + 1e-12);
        // Training moved the parameters and improved on the initial loss.
        let mean = |st: &TrainableState| -> f64 {
            (0..trainer.sample_count()).map(|i| trainer.loss(st, i).unwrap()).sum::<f64>()
                / trainer.sample_count() as f64
        };
        assert!(mean(&a.state) < mean(&init));
        // Background rows stayed pinned.
        for ch in 0..CHANNELS {
            for &v in &a.final_state.table.vectors[ch][..a.final_state.table.dim] {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn plateau_schedule_reduces_and_resets() {
        let mut s = PlateauSchedule::new(1.0, 2, 0.5, 1e-9);
        let losses = [1.0, 0.9, 0.9, 0.9, 0.9, 0.5, 0.5, 0.5, 0.5];
        let mut lrs = Vec::new();
        let mut improved = Vec::new();
        for &l in &losses {
            lrs.push(s.lr());
            improved.push(s.observe(l));
        }
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.25]);
        assert_eq!(improved, vec![true, true, false, false, false, true, false, false, false]);
    }

    #[test]
    fn divergent_runs_surface_a_training_error() {
        let trainer = Trainer::new(tiny_setup(), &tiny_samples(1, 77)).unwrap();
        let init = TrainableState::init(&ClassTable::default_table(), 2, 3, 5).unwrap();
        let opts = TrainOptions {
            epochs: 40,
            batch_size: 1,
            learning_rate: 1e25,
            ..TrainOptions::default()
        };
        let err = train(&trainer, &init, &opts).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err}");
    }

    #[test]
    fn poses_too_close_to_the_border_are_rejected() {
        let mut samples = tiny_samples(1, 91);
        // Move the pose right next to the border: the 9-cell disc cannot fit.
        samples[0].gt = Pose { u: 2, v: 2, theta_deg: 30.0 };
        samples[0].pano =
            render_scene_panorama(&samples[0].raster, &samples[0].gt, 64, 1.2).unwrap();
        let err = Trainer::new(tiny_setup(), &samples).err().unwrap();
        assert!(matches!(err, Error::Input(_)), "{err}");
        assert!(err.to_string().contains("sample 0"), "{err}");
    }
}

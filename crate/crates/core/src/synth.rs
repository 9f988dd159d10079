//! Synthetic towns for testing and training: a seeded scene generator, a
//! painted-world panorama renderer, a map-truth feature renderer, and
//! panorama perturbations. Everything here is bit-deterministic per seed.

use crate::bev::{sector_contains, BevConfig, BevFeature};
use crate::embed::{EmbeddingTable, NeuralMap};
use crate::error::{Error, Result};
use crate::fusion::Pose;
use crate::img::{EquirectImage, PixelGrid};
use crate::osm::{
    ClassTable, ClassifiedElement, ElementGeometry, GeoPoint, RasterMap, AREA_CHANNEL, CHANNELS,
    LINE_CHANNEL, POINT_CHANNEL,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Knobs of the town generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    /// Side length of the square map extent in meters.
    pub extent_m: f64,
    pub meters_per_px: f64,
    /// Spacing of the jittered road grid in meters.
    pub road_spacing_m: f64,
    /// Probability that a block between roads receives an area feature.
    pub building_density: f64,
    /// Expected point features per block.
    pub point_density: f64,
    /// Ground-truth poses to draw.
    pub pose_count: usize,
    /// Minimum distance of a pose from the map border in meters.
    pub pose_margin_m: f64,
    pub seed: u64,
    pub anchor: GeoPoint,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            extent_m: 32.0,
            meters_per_px: 0.5,
            road_spacing_m: 8.0,
            building_density: 0.7,
            point_density: 1.0,
            pose_count: 4,
            pose_margin_m: 6.0,
            seed: 0,
            anchor: GeoPoint { lat_deg: 48.2, lon_deg: 16.37 },
        }
    }
}

/// A generated town: its vector elements, their raster, and ground-truth
/// camera poses on road pixels.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub anchor: GeoPoint,
    pub table: ClassTable,
    pub elements: Vec<ClassifiedElement>,
    pub raster: RasterMap,
    /// Poses at exact map pixel centers, heading in (−180, 180].
    pub gt_poses: Vec<Pose>,
}

fn make_element(
    table: &ClassTable,
    channel: usize,
    class: &str,
    geometry: ElementGeometry,
) -> ClassifiedElement {
    ClassifiedElement {
        channel,
        class_index: table.class_index(channel, class).expect("default vocabulary class"),
        class: class.to_string(),
        geometry,
    }
}

/// Draws an index from cumulative weights.
fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        t -= w;
        if t < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Generates a jittered road grid with blocks of area features and
/// scattered point features, rasterizes it, and samples ground-truth poses
/// at road pixels clear of area features and the map border.
pub fn synth_scene(params: &SceneParams) -> Result<SyntheticScene> {
    if !(params.extent_m > 0.0) || !(params.meters_per_px > 0.0) || !(params.road_spacing_m > 0.0)
    {
        return Err(Error::Input(
            "scene extent, resolution and road spacing must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let table = ClassTable::default_table();
    let half = params.extent_m / 2.0;
    let geo = |e: f64, n: f64| GeoPoint::from_local_meters(e, n, &params.anchor);
    let line = |a: (f64, f64), b: (f64, f64)| {
        ElementGeometry::Line(vec![geo(a.0, a.1), geo(b.0, b.1)])
    };

    let mut elements = Vec::new();

    // Jittered road grid. Grid lines sit between blocks; jitter keeps them
    // comfortably inside their corridor.
    let n_lines = (params.extent_m / params.road_spacing_m).floor() as usize;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 1..=n_lines {
        let base = k as f64 * params.road_spacing_m - half;
        xs.push(base + (rng.gen::<f64>() - 0.5) * 0.3 * params.road_spacing_m);
    }
    for k in 1..=n_lines {
        let base = k as f64 * params.road_spacing_m - half;
        ys.push(base + (rng.gen::<f64>() - 0.5) * 0.3 * params.road_spacing_m);
    }
    for &x in &xs {
        elements.push(make_element(&table, LINE_CHANNEL, "road", line((x, -half + 0.5), (x, half - 0.5))));
    }
    for &y in &ys {
        elements.push(make_element(&table, LINE_CHANNEL, "road", line((-half + 0.5, y), (half - 0.5, y))));
    }

    // Blocks between consecutive roads (including the border strips).
    let mut x_edges = vec![-half];
    x_edges.extend(&xs);
    x_edges.push(half);
    let mut y_edges = vec![-half];
    y_edges.extend(&ys);
    y_edges.push(half);
    let area_classes = ["building", "parking", "grass", "water"];
    let area_weights = [0.5, 0.2, 0.2, 0.1];
    let point_classes = ["tree", "pole", "crossing"];
    let point_weights = [0.5, 0.3, 0.2];
    for wy in y_edges.windows(2) {
        for wx in x_edges.windows(2) {
            let (x0, x1, y0, y1) = (wx[0], wx[1], wy[0], wy[1]);
            if rng.gen::<f64>() < params.building_density {
                let inset = 1.2 + rng.gen::<f64>() * 0.8;
                if x1 - x0 > 2.0 * inset + 1.0 && y1 - y0 > 2.0 * inset + 1.0 {
                    let class = area_classes[pick_weighted(&mut rng, &area_weights)];
                    elements.push(make_element(
                        &table,
                        AREA_CHANNEL,
                        class,
                        ElementGeometry::Area(vec![
                            geo(x0 + inset, y0 + inset),
                            geo(x1 - inset, y0 + inset),
                            geo(x1 - inset, y1 - inset),
                            geo(x0 + inset, y1 - inset),
                        ]),
                    ));
                }
            }
            let mut n_points = params.point_density.floor() as usize;
            if rng.gen::<f64>() < params.point_density.fract() {
                n_points += 1;
            }
            for _ in 0..n_points {
                let class = point_classes[pick_weighted(&mut rng, &point_weights)];
                let e = x0 + rng.gen::<f64>() * (x1 - x0);
                let n = y0 + rng.gen::<f64>() * (y1 - y0);
                elements.push(make_element(
                    &table,
                    POINT_CHANNEL,
                    class,
                    ElementGeometry::Point(geo(e, n)),
                ));
            }
        }
    }

    let mut raster =
        crate::osm::rasterize(&elements, params.anchor, params.extent_m, params.meters_per_px)?;
    let road = table.class_index(LINE_CHANNEL, "road").unwrap() as u16;

    let collect_candidates = |raster: &RasterMap, margin_px: usize| {
        let mut c = Vec::new();
        let side = raster.width;
        if side < 2 * margin_px + 1 {
            return c;
        }
        for v in margin_px..side - margin_px {
            for u in margin_px..side - margin_px {
                if raster.class_at(LINE_CHANNEL, v, u) == road
                    && raster.class_at(AREA_CHANNEL, v, u) == 0
                {
                    c.push((u, v));
                }
            }
        }
        c
    };
    let margin_px = (params.pose_margin_m / params.meters_per_px).ceil() as usize;
    let mut candidates = collect_candidates(&raster, margin_px);
    if candidates.is_empty() {
        // Fall back to an implicit central road so poses always exist.
        elements.push(make_element(
            &table,
            LINE_CHANNEL,
            "road",
            line((-half + 0.5, 0.3), (half - 0.5, 0.3)),
        ));
        raster = crate::osm::rasterize(
            &elements,
            params.anchor,
            params.extent_m,
            params.meters_per_px,
        )?;
        candidates = collect_candidates(&raster, margin_px);
    }
    if candidates.is_empty() {
        return Err(Error::Degenerate(format!(
            "no road pixel clears the {margin_px} px pose margin",
        )));
    }

    // Fisher–Yates shuffle, then cycle if more poses than candidates.
    for i in (1..candidates.len()).rev() {
        let j = rng.gen_range(0..=i);
        candidates.swap(i, j);
    }
    let gt_poses = (0..params.pose_count)
        .map(|p| {
            let (u, v) = candidates[p % candidates.len()];
            let theta_deg = 180.0 - rng.gen::<f64>() * 360.0;
            Pose { u, v, theta_deg }
        })
        .collect();

    Ok(SyntheticScene { anchor: params.anchor, table, elements, raster, gt_poses })
}

// ── panorama rendering ──────────────────────────────────────────────────────

/// Painted color of a class stamp; distinct per (channel, class, component)
/// and frozen so renders are comparable across runs.
fn class_color(channel: usize, class: u16, component: usize) -> f64 {
    let key = (channel * 5 + class as usize) * 3 + component;
    0.2 + 0.75 * ((key * 61) % 23) as f64 / 23.0
}

const GROUND_COLOR: f64 = 0.05;

/// Map-side embedding whose class vectors equal the painted panorama colors,
/// so untrained pixel features and map features share one 3-dimensional
/// space. Useful as a hand-built baseline for end-to-end runs on scenes
/// rendered by [`render_scene_panorama`].
pub fn paint_table(classes: &ClassTable) -> Result<EmbeddingTable> {
    let mut vectors: [Vec<f64>; CHANNELS] = std::array::from_fn(|_| Vec::new());
    for (ch, rows) in vectors.iter_mut().enumerate() {
        let n = classes.classes[ch].len();
        rows.resize(n * 3, 0.0);
        for class in 1..n {
            for comp in 0..3 {
                rows[class * 3 + comp] = class_color(ch, class as u16, comp);
            }
        }
    }
    EmbeddingTable::new("paint", classes.classes.clone(), 3, vectors)
}

/// Paints the class raster seen from a pose into a 3-channel equirect
/// panorama. Rays above the horizon are sky (0); ground rays take the color
/// of the nearest raster pixel with point features over lines over areas.
pub fn render_scene_panorama(
    raster: &RasterMap,
    pose: &Pose,
    width: usize,
    camera_height_m: f64,
) -> Result<EquirectImage> {
    if width % 2 != 0 || width == 0 {
        return Err(Error::Input(format!(
            "panorama width must be a positive even number, got {width}"
        )));
    }
    if !(camera_height_m > 0.0) {
        return Err(Error::Input("camera height must be positive".into()));
    }
    if pose.u >= raster.width || pose.v >= raster.height {
        return Err(Error::Input(format!(
            "pose pixel ({}, {}) lies outside the {}×{} raster",
            pose.u, pose.v, raster.width, raster.height
        )));
    }
    let height = width / 2;
    let mut img = PixelGrid::zeros(width, height, 3);
    let cam_east = raster.east_of_col(pose.u as f64);
    let cam_north = raster.north_of_row(pose.v as f64);
    for y in 0..height {
        let elevation_deg = 90.0 - y as f64 * 180.0 / height as f64;
        if elevation_deg >= 0.0 {
            continue; // sky stays zero
        }
        let drop = (-elevation_deg).to_radians().tan();
        let range = camera_height_m / drop;
        for x in 0..width {
            let cam_heading_deg = x as f64 * 360.0 / width as f64 - 180.0;
            let world_heading = (cam_heading_deg + pose.theta_deg).to_radians();
            let east = cam_east + range * world_heading.sin();
            let north = cam_north + range * world_heading.cos();
            // Nearest raster pixel under the ray, in corner coordinates.
            let px = (east / raster.meters_per_px + raster.width as f64 / 2.0).floor();
            let py = (raster.height as f64 / 2.0 - north / raster.meters_per_px).floor();
            if px < 0.0 || py < 0.0 || px >= raster.width as f64 || py >= raster.height as f64 {
                continue; // beyond the mapped extent: leave black
            }
            let (ux, uy) = (px as usize, py as usize);
            let stamp = [
                (POINT_CHANNEL, raster.class_at(POINT_CHANNEL, uy, ux)),
                (LINE_CHANNEL, raster.class_at(LINE_CHANNEL, uy, ux)),
                (AREA_CHANNEL, raster.class_at(AREA_CHANNEL, uy, ux)),
            ]
            .into_iter()
            .find(|&(_, c)| c != 0);
            for comp in 0..3 {
                let i = img.sample_index(x, y, comp);
                img.data[i] = match stamp {
                    Some((ch, c)) => class_color(ch, c, comp),
                    None => GROUND_COLOR,
                };
            }
        }
    }
    EquirectImage::new(img)
}

// ── map-truth features ──────────────────────────────────────────────────────

/// Renders the feature grid a camera at `pose` would ideally produce, by
/// sampling the map itself: each in-sector cell within range takes the
/// bilinear map feature under its world position. `fov_deg` of 360 renders
/// the full disc; smaller values render the camera-frame sector
/// `[yaw_deg, yaw_deg + fov_deg)`.
pub fn render_oracle_bev(
    map: &NeuralMap,
    pose: &Pose,
    cfg: &BevConfig,
    yaw_deg: f64,
    fov_deg: f64,
) -> Result<BevFeature> {
    cfg.validate()?;
    if pose.u >= map.width || pose.v >= map.height {
        return Err(Error::Input(format!(
            "pose pixel ({}, {}) lies outside the {}×{} map",
            pose.u, pose.v, map.width, map.height
        )));
    }
    let g = cfg.grid_size;
    let mut out = BevFeature::zeros(g, map.channels, cfg.meters_per_cell);
    let cam_east = map.east_of_col(pose.u as f64);
    let cam_north = map.north_of_row(pose.v as f64);
    let (sin_t, cos_t) = pose.theta_deg.to_radians().sin_cos();
    let full_disc = fov_deg >= 360.0;
    for i in 0..g {
        for j in 0..g {
            let (e_c, n_c) = cfg.cell_offset_m(i, j);
            let r = (e_c * e_c + n_c * n_c).sqrt();
            if r <= 0.0 || r > cfg.max_range_m {
                continue;
            }
            if !full_disc {
                let heading = e_c.atan2(n_c).to_degrees();
                if !sector_contains(heading, yaw_deg, fov_deg) {
                    continue;
                }
            }
            let east = cam_east + e_c * cos_t + n_c * sin_t;
            let north = cam_north - e_c * sin_t + n_c * cos_t;
            let x = map.col_of_east(east);
            let y = map.row_of_north(north);
            if x < 0.0 || y < 0.0 || x > (map.width - 1) as f64 || y > (map.height - 1) as f64 {
                continue; // bilinear support would leave the map
            }
            let x0 = (x.floor() as usize).min(map.width - 2);
            let y0 = (y.floor() as usize).min(map.height - 2);
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            out.mask[i * g + j] = true;
            for c in 0..map.channels {
                let v00 = map.value_at(c, y0, x0);
                let v01 = map.value_at(c, y0, x0 + 1);
                let v10 = map.value_at(c, y0 + 1, x0);
                let v11 = map.value_at(c, y0 + 1, x0 + 1);
                let v = v00 * (1.0 - fx) * (1.0 - fy)
                    + v01 * fx * (1.0 - fy)
                    + v10 * (1.0 - fx) * fy
                    + v11 * fx * fy;
                let vi = out.value_index(c, i, j);
                out.values[vi] = v;
            }
        }
    }
    Ok(out)
}

// ── perturbations ───────────────────────────────────────────────────────────

/// A deterministic panorama corruption.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    /// Horizontal box blur of the given width in pixels, wrapping across
    /// the ±180° seam.
    MotionBlur { magnitude_px: f64 },
    /// Multiplies every sample by `factor`, then clamps to [0, 1].
    Exposure { factor: f64 },
    /// Adds seeded Gaussian noise, then clamps to [0, 1].
    GaussianNoise { sigma: f64, seed: u64 },
}

/// Applies a perturbation; output stays a valid panorama in [0, 1].
pub fn perturb(img: &EquirectImage, spec: &Perturbation) -> Result<EquirectImage> {
    let src = &img.pixels;
    let (w, h, ch) = (src.width, src.height, src.channels);
    let mut out = src.clone();
    match *spec {
        Perturbation::MotionBlur { magnitude_px } => {
            if !(magnitude_px >= 0.0) {
                return Err(Error::Input(format!(
                    "blur magnitude must be non-negative, got {magnitude_px}"
                )));
            }
            let width = (magnitude_px.round() as usize).max(1);
            if width == 1 {
                return Ok(img.clone());
            }
            let start = -((width as isize - 1) / 2);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..ch {
                        let mut acc = 0.0;
                        for t in 0..width {
                            let sx = (x as isize + start + t as isize)
                                .rem_euclid(w as isize) as usize;
                            acc += src.data[src.sample_index(sx, y, c)];
                        }
                        let oi = out.sample_index(x, y, c);
                        out.data[oi] = acc / width as f64;
                    }
                }
            }
        }
        Perturbation::Exposure { factor } => {
            if !(factor >= 0.0) {
                return Err(Error::Input(format!(
                    "exposure factor must be non-negative, got {factor}"
                )));
            }
            for v in out.data.iter_mut() {
                *v = (*v * factor).clamp(0.0, 1.0);
            }
        }
        Perturbation::GaussianNoise { sigma, seed } => {
            if !(sigma >= 0.0) {
                return Err(Error::Input(format!(
                    "noise level must be non-negative, got {sigma}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma).map_err(|_| Error::Input(format!(
                "noise level {sigma} is not a valid standard deviation"
            )))?;
            for v in out.data.iter_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    EquirectImage::new(out)
}

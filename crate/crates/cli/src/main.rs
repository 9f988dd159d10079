//! `pplt` — command-line frontend for the panorama pose localization toolkit.
//!
//! Every subcommand is a thin wrapper over `pplt-core`: images travel as PNM
//! files, tensors (rasters, feature maps, score volumes, checkpoints) as the
//! toolkit's text-header container format, and poses as whitespace-separated
//! plain-text records.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pplt_core::bev::{view_to_bev, BevConfig, PixelEmbedding};
use pplt_core::container::{format_f64_list, Container, TensorEntry};
use pplt_core::embed::{embed_map, EmbeddingTable, NeuralMap};
use pplt_core::eval::{join_by_id, parse_pose_lines, pose_to_metric, recall, RecallThresholds};
use pplt_core::fusion::{fuse, FusedVolume, FusionParams, FusionStrategy};
use pplt_core::img::{read_pnm, write_pnm, EquirectImage, PinholeView, PixelGrid};
use pplt_core::learn::{train, TrainOptions, TrainSetup, TrainableState, Trainer, TrainingSample};
use pplt_core::matching::{ROTATIONS_EVAL_DEFAULT, ROTATIONS_TRAIN_DEFAULT};
use pplt_core::osm::{classify, parse_osm, rasterize, ClassTable, GeoPoint};
use pplt_core::pano::pano_to_views;
use pplt_core::pipeline::{localize, LocalizeOptions};
use pplt_core::store::{
    bev_to_container, checkpoint_from_container, checkpoint_to_container, neural_map_from_container,
    raster_from_container, raster_to_container, scores_from_container, scores_to_container, Checkpoint,
};
use pplt_core::synth::{paint_table, perturb, render_scene_panorama, synth_scene, Perturbation, SceneParams};

#[derive(Parser)]
#[command(name = "pplt", version, about = "Metric localization of panoramic cameras against rasterized vector maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split an equirectangular panorama into pinhole views
    Split(SplitArgs),
    /// Rasterize OSM XML into a class-raster container and a preview image
    Rasterize(RasterizeArgs),
    /// Project one pinhole view onto the ground plane as a BEV feature container
    Bev(BevArgs),
    /// Estimate the pose of a panorama against a map
    Localize(LocalizeArgs),
    /// Fuse a panorama score volume with a front-view score volume
    Fuse(FuseArgs),
    /// Score a prediction file against ground truth with recall metrics
    Eval(EvalArgs),
    /// Generate a synthetic scene bundle from a seed
    Synth(SynthArgs),
    /// Apply a deterministic perturbation to a panorama
    Perturb(PerturbArgs),
    /// Fit map embeddings and fusion weights on synthetic scenes
    Train(TrainArgs),
}

/// Dying quietly when a downstream pipe closes (`pplt split | head`) is the
/// expected behavior for a line-oriented tool; Rust's default turns SIGPIPE
/// into a panic inside `println!`.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> Result<()> {
    reset_sigpipe();
    pplt_core::util::init_thread_pool_from_env();
    match Cli::parse().command {
        Command::Split(a) => run_split(a),
        Command::Rasterize(a) => run_rasterize(a),
        Command::Bev(a) => run_bev(a),
        Command::Localize(a) => run_localize(a),
        Command::Fuse(a) => run_fuse(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a),
        Command::Perturb(a) => run_perturb(a),
        Command::Train(a) => run_train(a),
    }
}

// ── shared flag groups and parsers ──────────────────────────────────────────

/// Geometry of the BEV grid; defaults mirror `BevConfig::default()`.
#[derive(Args)]
struct GridArgs {
    /// Cells per side of the square BEV grid (odd, at least 3)
    #[arg(long, default_value_t = 33)]
    grid_size: usize,
    /// Ground meters covered by one BEV cell
    #[arg(long, default_value_t = 0.5)]
    meters_per_cell: f64,
    /// Camera height above the ground plane in meters
    #[arg(long, default_value_t = 1.6)]
    camera_height_m: f64,
    /// Cells beyond this camera distance in meters are masked out
    #[arg(long, default_value_t = 8.0)]
    max_range_m: f64,
}

impl GridArgs {
    fn config(&self) -> BevConfig {
        BevConfig {
            grid_size: self.grid_size,
            meters_per_cell: self.meters_per_cell,
            camera_height_m: self.camera_height_m,
            max_range_m: self.max_range_m,
        }
    }
}

fn parse_strategy(s: &str) -> Result<FusionStrategy, String> {
    s.parse().map_err(|e: pplt_core::Error| e.to_string())
}

fn parse_geo_point(s: &str) -> Result<GeoPoint, String> {
    let (lat, lon) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `lat,lon`, got `{s}`"))?;
    let lat: f64 = lat.trim().parse().map_err(|_| format!("bad latitude `{lat}`"))?;
    let lon: f64 = lon.trim().parse().map_err(|_| format!("bad longitude `{lon}`"))?;
    Ok(GeoPoint::new(lat, lon))
}

// ── file plumbing ───────────────────────────────────────────────────────────

fn read_equirect(path: &Path) -> Result<EquirectImage> {
    let grid = read_pnm(path).with_context(|| format!("reading panorama {}", path.display()))?;
    Ok(EquirectImage::new(grid)?)
}

fn read_container(path: &Path) -> Result<Container> {
    Container::read(path).with_context(|| format!("reading container {}", path.display()))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(checkpoint_from_container(&read_container(path)?)?)
}

/// Loads either kind of map container: a class raster (embedded on the fly
/// with `table`) or an already-embedded feature map.
fn read_map(path: &Path, table: &EmbeddingTable) -> Result<NeuralMap> {
    let c = read_container(path)?;
    if c.entry("classes").is_ok() {
        Ok(embed_map(&raster_from_container(&c)?, table)?)
    } else {
        Ok(neural_map_from_container(&c)?)
    }
}

fn fused_to_container(f: &FusedVolume) -> Container {
    let values = TensorEntry::new("fused", vec![f.height, f.width, f.rotations], f.values.clone())
        .expect("fused buffer matches its shape")
        .with_meta("angle_bins_deg", format_f64_list(&f.angle_bins_deg));
    Container::new(vec![values])
}

fn write_container(path: &Path, c: &Container) -> Result<()> {
    c.write(path).with_context(|| format!("writing container {}", path.display()))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(file, "{line}")?;
    Ok(())
}

// ── split ───────────────────────────────────────────────────────────────────

#[derive(Args)]
struct SplitArgs {
    /// Input equirectangular panorama (PNM, width = 2 x height)
    #[arg(long)]
    pano: PathBuf,
    /// Number of views to cut (3, 4, 6, or 9)
    #[arg(long, default_value_t = 3)]
    views: usize,
    /// Width of each view in pixels
    #[arg(long, default_value_t = 96)]
    width: usize,
    /// Height of each view in pixels [default: 2/3 of the width]
    #[arg(long)]
    height: Option<usize>,
    /// Write 16-bit samples instead of 8-bit
    #[arg(long)]
    deep: bool,
    /// Directory receiving view<N>.pnm
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn run_split(a: SplitArgs) -> Result<()> {
    let pano = read_equirect(&a.pano)?;
    let height = a.height.unwrap_or(a.width * 2 / 3);
    let views = pano_to_views(&pano, a.views, a.width, height)?;
    fs::create_dir_all(&a.out_dir)?;
    for (i, view) in views.iter().enumerate() {
        let path = a.out_dir.join(format!("view{i}.pnm"));
        write_pnm(&path, &view.pixels, a.deep)?;
        println!(
            "{}: sector [{}, {})°, axis {}°",
            path.display(),
            view.yaw_offset_deg,
            view.yaw_offset_deg + view.fov_deg,
            view.yaw_offset_deg + view.fov_deg / 2.0,
        );
    }
    Ok(())
}

// ── rasterize ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct RasterizeArgs {
    /// Input OSM XML file
    #[arg(long)]
    osm: PathBuf,
    /// Class rules file (`key=value -> channel:class` lines) [default: built-in vocabulary]
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Raster center as `lat,lon` [default: centroid of the nodes]
    #[arg(long, value_parser = parse_geo_point)]
    anchor: Option<GeoPoint>,
    /// Side length of the square raster in meters [default: node spread plus a margin]
    #[arg(long)]
    extent_m: Option<f64>,
    /// Raster resolution in meters per pixel
    #[arg(long, default_value_t = 0.5)]
    meters_per_px: f64,
    /// Output raster container
    #[arg(long)]
    out: PathBuf,
    /// Optional color preview image (PNM)
    #[arg(long)]
    preview: Option<PathBuf>,
}

fn run_rasterize(a: RasterizeArgs) -> Result<()> {
    let text = fs::read_to_string(&a.osm).with_context(|| format!("reading {}", a.osm.display()))?;
    let scene = parse_osm(&text)?;
    if scene.nodes.is_empty() {
        bail!("{} holds no nodes", a.osm.display());
    }
    let table = match &a.classes {
        Some(path) => ClassTable::parse(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => ClassTable::default_table(),
    };
    let anchor = a.anchor.unwrap_or_else(|| {
        let n = scene.nodes.len() as f64;
        GeoPoint::new(
            scene.nodes.iter().map(|nd| nd.point.lat_deg).sum::<f64>() / n,
            scene.nodes.iter().map(|nd| nd.point.lon_deg).sum::<f64>() / n,
        )
    });
    let extent_m = a.extent_m.unwrap_or_else(|| {
        let reach = scene
            .nodes
            .iter()
            .map(|nd| {
                let (east, north) = nd.point.local_meters(&anchor);
                east.abs().max(north.abs())
            })
            .fold(0.0, f64::max);
        (2.0 * reach + 4.0).max(8.0)
    });
    let elements = classify(&scene, &table)?;
    let raster = rasterize(&elements, anchor, extent_m, a.meters_per_px)?;
    write_container(&a.out, &raster_to_container(&raster))?;
    println!(
        "{}: {}x{} px at {} m/px, {} elements, anchor {},{}",
        a.out.display(),
        raster.width,
        raster.height,
        raster.meters_per_px,
        elements.len(),
        anchor.lat_deg,
        anchor.lon_deg,
    );
    if let Some(preview) = &a.preview {
        let colors = embed_map(&raster, &paint_table(&table)?)?;
        let mut grid = PixelGrid::zeros(colors.width, colors.height, 3);
        for y in 0..colors.height {
            for x in 0..colors.width {
                for c in 0..3 {
                    grid.set(x, y, c, colors.value_at(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        write_pnm(preview, &grid, false)?;
        println!("{}: preview written", preview.display());
    }
    Ok(())
}

// ── bev ─────────────────────────────────────────────────────────────────────

#[derive(Args)]
struct BevArgs {
    /// Input view image (PNM)
    #[arg(long)]
    view: PathBuf,
    /// Horizontal field of view of the input in degrees
    #[arg(long, default_value_t = 120.0)]
    fov_deg: f64,
    /// Heading where the view's sector starts, degrees clockwise from North
    #[arg(long, default_value_t = 0.0)]
    yaw_deg: f64,
    #[command(flatten)]
    grid: GridArgs,
    /// Checkpoint container supplying the pixel embedding [default: identity]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output BEV feature container
    #[arg(long)]
    out: PathBuf,
}

fn run_bev(a: BevArgs) -> Result<()> {
    let pixels = read_pnm(&a.view).with_context(|| format!("reading view {}", a.view.display()))?;
    let view = PinholeView::new(pixels, a.fov_deg, a.yaw_deg)?;
    let embed = match &a.checkpoint {
        Some(path) => read_checkpoint(path)?.state.pixel_embed,
        None => PixelEmbedding::identity(view.pixels.channels),
    };
    if embed.in_channels != view.pixels.channels {
        bail!(
            "view has {} channels but the checkpoint embedding expects {}",
            view.pixels.channels,
            embed.in_channels
        );
    }
    let bev = view_to_bev(&view, &embed, &a.grid.config())?;
    write_container(&a.out, &bev_to_container(&bev))?;
    println!(
        "{}: {} channels, {} of {} cells valid",
        a.out.display(),
        bev.channels,
        bev.valid_count(),
        bev.grid_size * bev.grid_size,
    );
    Ok(())
}

// ── localize ────────────────────────────────────────────────────────────────

#[derive(Args)]
struct LocalizeArgs {
    /// Input equirectangular panorama (PNM)
    #[arg(long)]
    pano: PathBuf,
    /// Map container: a class raster or an embedded feature map
    #[arg(long)]
    map: PathBuf,
    /// Checkpoint with trained embeddings and fusion weights [default: painted colors]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
    /// Number of pinhole views cut from the panorama (3, 4, 6, or 9)
    #[arg(long, default_value_t = 3)]
    views: usize,
    /// Width of each cut view in pixels
    #[arg(long, default_value_t = 96)]
    view_width: usize,
    /// Heading bins searched per map placement
    #[arg(long, default_value_t = ROTATIONS_EVAL_DEFAULT)]
    rotations: usize,
    /// Fusion strategy: pof, prior-uv, prior-theta, or none
    #[arg(long, default_value = "pof", value_parser = parse_strategy)]
    strategy: FusionStrategy,
    /// Position blend weight in [0, 1] [default: checkpoint value or 0.5]
    #[arg(long)]
    alpha: Option<f64>,
    /// Heading blend weight in [0, 1] [default: checkpoint value or 0.5]
    #[arg(long)]
    beta: Option<f64>,
    /// Write the fused volume container here
    #[arg(long)]
    fused_out: Option<PathBuf>,
    /// Write the panorama score volume container here
    #[arg(long)]
    pano_scores_out: Option<PathBuf>,
    /// Write the front-view score volume container here
    #[arg(long)]
    view_scores_out: Option<PathBuf>,
    /// Append a `id east_m north_m theta_deg` record here
    #[arg(long, requires = "id")]
    pred_out: Option<PathBuf>,
    /// Record id for --pred-out
    #[arg(long)]
    id: Option<String>,
}

fn run_localize(a: LocalizeArgs) -> Result<()> {
    let pano = read_equirect(&a.pano)?;
    let ck = a.checkpoint.as_deref().map(read_checkpoint).transpose()?;
    let (table, embed, trained) = match ck {
        Some(ck) => {
            let params = ck.state.fusion_params();
            (ck.state.table, ck.state.pixel_embed, params)
        }
        None => (
            paint_table(&ClassTable::default_table())?,
            PixelEmbedding::identity(pano.pixels.channels),
            FusionParams::default(),
        ),
    };
    if embed.in_channels != pano.pixels.channels {
        bail!(
            "panorama has {} channels but the pixel embedding expects {}",
            pano.pixels.channels,
            embed.in_channels
        );
    }
    let map = read_map(&a.map, &table)?;
    if map.channels != embed.out_channels {
        bail!(
            "map holds {}-channel features but the pixel embedding emits {}; pass a matching --checkpoint",
            map.channels,
            embed.out_channels
        );
    }
    let fusion = FusionParams::new(
        a.alpha.unwrap_or(trained.alpha),
        a.beta.unwrap_or(trained.beta),
    )?;
    let opts = LocalizeOptions {
        bev: a.grid.config(),
        view_count: a.views,
        view_width: a.view_width,
        rotations: a.rotations,
        fusion,
        strategy: a.strategy,
    };
    let loc = localize(&pano, &embed, &map, &opts)?;
    println!("{} {} {} {}", loc.pose.u, loc.pose.v, loc.pose.theta_deg, loc.score);
    if let Some(path) = &a.fused_out {
        write_container(path, &fused_to_container(&loc.fused))?;
    }
    if let Some(path) = &a.pano_scores_out {
        write_container(path, &scores_to_container(&loc.pano_scores))?;
    }
    if let Some(path) = &a.view_scores_out {
        write_container(path, &scores_to_container(&loc.view_scores))?;
    }
    if let Some(path) = &a.pred_out {
        let id = a.id.as_deref().expect("clap enforces --id with --pred-out");
        let m = pose_to_metric(&loc.pose, &map);
        append_line(path, &format!("{id} {} {} {}", m.east_m, m.north_m, m.theta_deg))?;
    }
    Ok(())
}

// ── fuse ────────────────────────────────────────────────────────────────────

#[derive(Args)]
struct FuseArgs {
    /// Panorama (surround) score volume container
    #[arg(long)]
    pano_scores: PathBuf,
    /// Front-view score volume container
    #[arg(long)]
    view_scores: PathBuf,
    /// Fusion strategy: pof, prior-uv, prior-theta, or none
    #[arg(long, default_value = "pof", value_parser = parse_strategy)]
    strategy: FusionStrategy,
    /// Position blend weight in [0, 1]
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Heading blend weight in [0, 1]
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// Write the fused volume container here
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_fuse(a: FuseArgs) -> Result<()> {
    let pano = scores_from_container(&read_container(&a.pano_scores)?)?;
    let view = scores_from_container(&read_container(&a.view_scores)?)?;
    let params = FusionParams::new(a.alpha, a.beta)?;
    let fused = fuse(&pano, &view, &params, a.strategy)?;
    let (pose, score) = fused.argmax_pose()?;
    println!("{} {} {} {}", pose.u, pose.v, pose.theta_deg, score);
    if let Some(path) = &a.out {
        write_container(path, &fused_to_container(&fused))?;
    }
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────────

#[derive(Args)]
struct EvalArgs {
    /// Prediction file: one `id east_m north_m theta_deg` record per line
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth file in the same format
    #[arg(long)]
    gt: PathBuf,
    /// Position recall thresholds in meters
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    position_m: Vec<f64>,
    /// Orientation recall thresholds in degrees
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    orientation_deg: Vec<f64>,
    /// Also write the report as CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let pred = parse_pose_lines(
        &fs::read_to_string(&a.pred).with_context(|| format!("reading {}", a.pred.display()))?,
    )?;
    let gt = parse_pose_lines(
        &fs::read_to_string(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?,
    )?;
    let (pred, gt) = join_by_id(&pred, &gt)?;
    let thresholds = RecallThresholds { position_m: a.position_m, orientation_deg: a.orientation_deg };
    let report = recall(&pred, &gt, &thresholds)?;
    print!("{report}");
    if let Some(path) = &a.csv {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

// ── synth ───────────────────────────────────────────────────────────────────

#[derive(Args)]
struct SynthArgs {
    /// Scene generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length of the square map in meters
    #[arg(long, default_value_t = 32.0)]
    extent_m: f64,
    /// Raster resolution in meters per pixel
    #[arg(long, default_value_t = 0.5)]
    meters_per_px: f64,
    /// Spacing of the jittered road grid in meters
    #[arg(long, default_value_t = 8.0)]
    road_spacing_m: f64,
    /// Probability that a block receives an area feature
    #[arg(long, default_value_t = 0.7)]
    building_density: f64,
    /// Expected point features per block
    #[arg(long, default_value_t = 1.0)]
    point_density: f64,
    /// Ground-truth poses to draw
    #[arg(long, default_value_t = 4)]
    poses: usize,
    /// Minimum pose distance from the map border in meters
    #[arg(long, default_value_t = 6.0)]
    pose_margin_m: f64,
    /// Anchor as `lat,lon`
    #[arg(long, value_parser = parse_geo_point)]
    anchor: Option<GeoPoint>,
    /// Rendered panorama width in pixels (even); 0 skips rendering
    #[arg(long, default_value_t = 512)]
    pano_width: usize,
    /// Camera height for the rendered panoramas in meters
    #[arg(long, default_value_t = 1.6)]
    camera_height_m: f64,
    /// Directory receiving raster.plt, gt.txt, and pano<N>.pnm
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut params = SceneParams {
        extent_m: a.extent_m,
        meters_per_px: a.meters_per_px,
        road_spacing_m: a.road_spacing_m,
        building_density: a.building_density,
        point_density: a.point_density,
        pose_count: a.poses,
        pose_margin_m: a.pose_margin_m,
        seed: a.seed,
        ..SceneParams::default()
    };
    if let Some(anchor) = a.anchor {
        params.anchor = anchor;
    }
    let scene = synth_scene(&params)?;
    fs::create_dir_all(&a.out_dir)?;

    let raster_path = a.out_dir.join("raster.plt");
    write_container(&raster_path, &raster_to_container(&scene.raster))?;
    println!(
        "{}: {}x{} px, {} elements",
        raster_path.display(),
        scene.raster.width,
        scene.raster.height,
        scene.elements.len(),
    );

    let mut gt = String::new();
    for (i, pose) in scene.gt_poses.iter().enumerate() {
        let east = scene.raster.east_of_col(pose.u as f64);
        let north = scene.raster.north_of_row(pose.v as f64);
        gt.push_str(&format!("pose{i} {east} {north} {}\n", pose.theta_deg));
    }
    let gt_path = a.out_dir.join("gt.txt");
    fs::write(&gt_path, gt)?;
    println!("{}: {} poses", gt_path.display(), scene.gt_poses.len());

    if a.pano_width > 0 {
        for (i, pose) in scene.gt_poses.iter().enumerate() {
            let pano = render_scene_panorama(&scene.raster, pose, a.pano_width, a.camera_height_m)?;
            let path = a.out_dir.join(format!("pano{i}.pnm"));
            write_pnm(&path, &pano.pixels, true)?;
            println!("{}: pose ({}, {}) heading {}°", path.display(), pose.u, pose.v, pose.theta_deg);
        }
    }
    Ok(())
}

// ── perturb ─────────────────────────────────────────────────────────────────

#[derive(Args)]
struct PerturbArgs {
    /// Input panorama (PNM, width = 2 x height)
    #[arg(long)]
    image: PathBuf,
    /// Perturbation kind: motion-blur, exposure, or noise
    #[arg(long)]
    kind: String,
    /// Blur width in pixels, exposure factor, or noise standard deviation
    #[arg(long)]
    magnitude: f64,
    /// Noise generator seed (noise kind only)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write 16-bit samples instead of 8-bit
    #[arg(long)]
    deep: bool,
    /// Output image (PNM)
    #[arg(long)]
    out: PathBuf,
}

fn run_perturb(a: PerturbArgs) -> Result<()> {
    let spec = match a.kind.as_str() {
        "motion-blur" => Perturbation::MotionBlur { magnitude_px: a.magnitude },
        "exposure" => Perturbation::Exposure { factor: a.magnitude },
        "noise" => Perturbation::GaussianNoise { sigma: a.magnitude, seed: a.seed },
        other => bail!("unknown perturbation `{other}` (expected motion-blur, exposure, or noise)"),
    };
    let pano = read_equirect(&a.image)?;
    let out = perturb(&pano, &spec)?;
    write_pnm(&a.out, &out.pixels, a.deep)?;
    println!("{}: {} applied", a.out.display(), a.kind);
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────────

#[derive(Args)]
struct TrainArgs {
    /// Training samples to draw (one panorama per ground-truth pose)
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// First scene seed; infeasible seeds are skipped
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    /// Side length of each training scene in meters
    #[arg(long, default_value_t = 16.0)]
    extent_m: f64,
    /// Raster resolution in meters per pixel
    #[arg(long, default_value_t = 0.5)]
    meters_per_px: f64,
    /// Spacing of the jittered road grid in meters
    #[arg(long, default_value_t = 5.0)]
    road_spacing_m: f64,
    /// Probability that a block receives an area feature
    #[arg(long, default_value_t = 0.8)]
    building_density: f64,
    /// Expected point features per block
    #[arg(long, default_value_t = 1.5)]
    point_density: f64,
    /// Ground-truth poses per scene
    #[arg(long, default_value_t = 1)]
    poses_per_scene: usize,
    /// Minimum pose distance from the map border in meters
    #[arg(long, default_value_t = 3.0)]
    pose_margin_m: f64,
    /// Rendered panorama width in pixels (even)
    #[arg(long, default_value_t = 64)]
    pano_width: usize,
    /// Cells per side of the square BEV grid (odd, at least 3)
    #[arg(long, default_value_t = 9)]
    grid_size: usize,
    /// Ground meters covered by one BEV cell
    #[arg(long, default_value_t = 0.5)]
    meters_per_cell: f64,
    /// Camera height above the ground plane in meters
    #[arg(long, default_value_t = 1.2)]
    camera_height_m: f64,
    /// Cells beyond this camera distance in meters are masked out
    #[arg(long, default_value_t = 2.0)]
    max_range_m: f64,
    /// Number of pinhole views cut from each panorama (3, 4, 6, or 9)
    #[arg(long, default_value_t = 3)]
    views: usize,
    /// Width of each cut view in pixels
    #[arg(long, default_value_t = 24)]
    view_width: usize,
    /// Heading bins searched per map placement
    #[arg(long, default_value_t = ROTATIONS_TRAIN_DEFAULT)]
    rotations: usize,
    /// Dimension of the trained map embedding
    #[arg(long, default_value_t = 3)]
    dim: usize,
    /// Parameter initialization seed
    #[arg(long, default_value_t = 7)]
    init_seed: u64,
    /// Training epochs
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    /// Samples per gradient step
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 10.0)]
    learning_rate: f64,
    /// Epochs without improvement before the learning rate drops
    #[arg(long, default_value_t = 3)]
    plateau_patience: usize,
    /// Learning-rate decay factor on plateau
    #[arg(long, default_value_t = 0.5)]
    plateau_factor: f64,
    /// Loss decrease that counts as improvement
    #[arg(long, default_value_t = 1e-6)]
    min_improvement: f64,
    /// Batch shuffling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the best state as a checkpoint container
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Write the per-epoch loss trace as CSV (`epoch,loss,lr`)
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

fn run_train(a: TrainArgs) -> Result<()> {
    if a.samples == 0 {
        bail!("--samples must be positive");
    }
    let mut samples = Vec::with_capacity(a.samples);
    let mut seed = a.scene_seed;
    // Sparse scenes can fail pose placement; try successive seeds but give
    // up once failures dominate.
    let seed_budget = a.scene_seed + (a.samples as u64) * 20 + 100;
    while samples.len() < a.samples {
        if seed >= seed_budget {
            bail!(
                "{} of {} samples after {} scene seeds; densities look infeasible for {} m",
                samples.len(),
                a.samples,
                seed - a.scene_seed,
                a.extent_m
            );
        }
        let params = SceneParams {
            extent_m: a.extent_m,
            meters_per_px: a.meters_per_px,
            road_spacing_m: a.road_spacing_m,
            building_density: a.building_density,
            point_density: a.point_density,
            pose_count: a.poses_per_scene,
            pose_margin_m: a.pose_margin_m,
            seed,
            ..SceneParams::default()
        };
        seed += 1;
        let Ok(scene) = synth_scene(&params) else { continue };
        for gt in &scene.gt_poses {
            if samples.len() == a.samples {
                break;
            }
            let pano = render_scene_panorama(&scene.raster, gt, a.pano_width, a.camera_height_m)?;
            samples.push(TrainingSample { pano, raster: scene.raster.clone(), gt: gt.clone() });
        }
    }

    let setup = TrainSetup {
        bev: BevConfig {
            grid_size: a.grid_size,
            meters_per_cell: a.meters_per_cell,
            camera_height_m: a.camera_height_m,
            max_range_m: a.max_range_m,
        },
        view_count: a.views,
        view_width: a.view_width,
        rotations: a.rotations,
    };
    let trainer = Trainer::new(setup, &samples)?;
    let init = TrainableState::init(&ClassTable::default_table(), a.dim, 3, a.init_seed)?;
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        plateau_patience: a.plateau_patience,
        plateau_factor: a.plateau_factor,
        min_improvement: a.min_improvement,
        seed: a.seed,
    };
    println!("training {} parameters on {} samples", init.param_count(), samples.len());
    let outcome = train(&trainer, &init, &opts)?;
    for (epoch, (&loss, &lr)) in outcome.loss_trace.iter().zip(&outcome.lr_trace).enumerate() {
        println!("epoch {epoch}: loss {loss:.4}, lr {lr}");
    }
    println!(
        "best epoch {} (loss {:.4}), final loss {:.4}",
        outcome.best_epoch,
        outcome.loss_trace[outcome.best_epoch],
        outcome.loss_trace.last().expect("at least one epoch ran"),
    );

    if let Some(path) = &a.loss_csv {
        let mut csv = String::from("epoch,loss,lr\n");
        for (epoch, (&loss, &lr)) in outcome.loss_trace.iter().zip(&outcome.lr_trace).enumerate() {
            csv.push_str(&format!("{epoch},{loss},{lr}\n"));
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.checkpoint_out {
        let ck = Checkpoint {
            state: outcome.state.clone(),
            epoch: outcome.best_epoch,
            loss: outcome.loss_trace[outcome.best_epoch],
            lr: outcome.lr_trace[outcome.best_epoch],
        };
        write_container(path, &checkpoint_to_container(&ck))?;
        println!("{}: checkpoint written", path.display());
    }
    Ok(())
}

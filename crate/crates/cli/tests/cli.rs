//! End-to-end smoke test: drives the `pplt` binary through the whole
//! pipeline — synth → localize → fuse → eval, plus split/bev, rasterize,
//! perturb, and a tiny training run — inside one temp directory.

use std::fs;
use std::path::Path;
use std::process::Command;

use pplt_core::container::Container;
use pplt_core::store::{bev_from_container, checkpoint_from_container, raster_from_container};

fn pplt(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_pplt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawning pplt");
    assert!(
        out.status.success(),
        "pplt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

/// `u v theta score` line → (u, v, theta).
fn parse_pose_line(line: &str) -> (usize, usize, f64) {
    let mut it = line.split_whitespace();
    let u = it.next().unwrap().parse().unwrap();
    let v = it.next().unwrap().parse().unwrap();
    let theta = it.next().unwrap().parse().unwrap();
    let _score: f64 = it.next().unwrap().parse().unwrap();
    assert_eq!(it.next(), None, "pose line has exactly four fields: {line}");
    (u, v, theta)
}

#[test]
fn pipeline_round_trips_through_the_binary() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();

    // A small but feature-bearing scene; geometry flags below match its scale.
    let tiny_grid: &[&str] =
        &["--grid-size", "9", "--max-range-m", "2", "--camera-height-m", "1.2"];
    pplt(
        dir,
        &[
            "synth",
            "--seed", "3",
            "--extent-m", "16",
            "--road-spacing-m", "5",
            "--building-density", "0.8",
            "--point-density", "1.5",
            "--poses", "1",
            "--pose-margin-m", "3",
            "--pano-width", "64",
            "--camera-height-m", "1.2",
            "--out-dir", ".",
        ],
    );
    for name in ["raster.plt", "gt.txt", "pano0.pnm"] {
        assert!(dir.join(name).exists(), "synth left no {name}");
    }
    raster_from_container(&Container::read(&dir.join("raster.plt")).unwrap())
        .expect("synth raster container reads back");

    // Localization prints one pose record and can dump every intermediate.
    let mut localize_args = vec![
        "localize",
        "--pano", "pano0.pnm",
        "--map", "raster.plt",
        "--view-width", "24",
        "--rotations", "32",
        "--fused-out", "fused.plt",
        "--pano-scores-out", "ps.plt",
        "--view-scores-out", "vs.plt",
        "--pred-out", "pred.txt",
        "--id", "pose0",
    ];
    localize_args.extend_from_slice(tiny_grid);
    let loc_line = pplt(dir, &localize_args);
    let loc_pose = parse_pose_line(&loc_line);
    for name in ["fused.plt", "ps.plt", "vs.plt", "pred.txt"] {
        assert!(dir.join(name).exists(), "localize left no {name}");
    }

    // Refusing the dumped volumes offline lands on the same pose (scores pass
    // through the 32-bit container payload, so only the pose is bit-stable).
    let fuse_line = pplt(dir, &["fuse", "--pano-scores", "ps.plt", "--view-scores", "vs.plt"]);
    assert_eq!(parse_pose_line(&fuse_line), loc_pose);
    pplt(
        dir,
        &["fuse", "--pano-scores", "ps.plt", "--view-scores", "vs.plt", "--strategy", "none"],
    );

    // Recall report: pretty table on stdout, CSV on disk.
    let report = pplt(dir, &["eval", "--pred", "pred.txt", "--gt", "gt.txt", "--csv", "report.csv"]);
    assert!(report.contains("n = 1"), "unexpected report:\n{report}");
    assert!(report.contains("recall @"), "unexpected report:\n{report}");
    let csv = fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("metric,threshold,recall,n"));
    assert_eq!(csv.lines().count(), 7, "3 position + 3 orientation rows:\n{csv}");

    // Panorama → three 120° views → one view becomes a BEV container.
    let split_out = pplt(
        dir,
        &["split", "--pano", "pano0.pnm", "--views", "3", "--width", "24", "--height", "16"],
    );
    assert!(split_out.contains("sector [0, 120)"), "unexpected split output:\n{split_out}");
    let mut bev_args = vec![
        "bev",
        "--view", "view0.pnm",
        "--fov-deg", "120",
        "--yaw-deg", "0",
        "--out", "bev0.plt",
    ];
    bev_args.extend_from_slice(tiny_grid);
    pplt(dir, &bev_args);
    let bev = bev_from_container(&Container::read(&dir.join("bev0.plt")).unwrap()).unwrap();
    assert_eq!(bev.grid_size, 9);

    // Unit-width motion blur is the identity; 16-bit output then reproduces
    // the input file byte for byte.
    pplt(
        dir,
        &[
            "perturb",
            "--image", "pano0.pnm",
            "--kind", "motion-blur",
            "--magnitude", "1",
            "--deep",
            "--out", "same.pnm",
        ],
    );
    assert_eq!(fs::read(dir.join("pano0.pnm")).unwrap(), fs::read(dir.join("same.pnm")).unwrap());
    pplt(
        dir,
        &[
            "perturb",
            "--image", "pano0.pnm",
            "--kind", "exposure",
            "--magnitude", "2.5",
            "--out", "bright.pnm",
        ],
    );
    assert!(dir.join("bright.pnm").exists());

    // Hand-written OSM XML → class raster + preview.
    fs::write(dir.join("town.osm"), TOWN_OSM).unwrap();
    let raster_out = pplt(
        dir,
        &[
            "rasterize",
            "--osm", "town.osm",
            "--out", "town.plt",
            "--preview", "town.pnm",
        ],
    );
    assert!(raster_out.contains("3 elements"), "unexpected rasterize output:\n{raster_out}");
    assert!(dir.join("town.pnm").exists());
    raster_from_container(&Container::read(&dir.join("town.plt")).unwrap())
        .expect("rasterized container reads back");

    // A two-sample, two-epoch training run: loss CSV plus a checkpoint that
    // localize can consume.
    let train_out = pplt(
        dir,
        &[
            "train",
            "--samples", "2",
            "--epochs", "2",
            "--batch-size", "2",
            "--rotations", "8",
            "--loss-csv", "loss.csv",
            "--checkpoint-out", "ck.plt",
        ],
    );
    assert!(train_out.contains("best epoch"), "unexpected train output:\n{train_out}");
    let loss_csv = fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert_eq!(loss_csv.lines().next(), Some("epoch,loss,lr"));
    assert_eq!(loss_csv.lines().count(), 3, "header + 2 epochs:\n{loss_csv}");
    let ck = checkpoint_from_container(&Container::read(&dir.join("ck.plt")).unwrap()).unwrap();
    assert_eq!(ck.state.pixel_embed.in_channels, 3);
    let mut ck_args = vec![
        "localize",
        "--pano", "pano0.pnm",
        "--map", "raster.plt",
        "--checkpoint", "ck.plt",
        "--view-width", "24",
        "--rotations", "8",
    ];
    ck_args.extend_from_slice(tiny_grid);
    parse_pose_line(&pplt(dir, &ck_args));
}

#[test]
fn bad_flags_fail_with_a_message() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = Command::new(env!("CARGO_BIN_EXE_pplt"))
        .current_dir(tmp.path())
        .args(["fuse", "--pano-scores", "a.plt", "--view-scores", "b.plt", "--strategy", "bogus"])
        .output()
        .expect("spawning pplt");
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown fusion strategy"), "stderr was:\n{stderr}");
}

const TOWN_OSM: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<osm version="0.6" generator="hand">
  <node id="1" lat="48.00000" lon="16.00000"/>
  <node id="2" lat="48.00018" lon="16.00000"/>
  <node id="3" lat="48.00018" lon="16.00027"/>
  <node id="4" lat="48.00000" lon="16.00027"/>
  <node id="5" lat="48.00004" lon="16.00004"/>
  <node id="6" lat="48.00012" lon="16.00004"/>
  <node id="7" lat="48.00012" lon="16.00012"/>
  <node id="8" lat="48.00004" lon="16.00012"/>
  <node id="9" lat="48.00009" lon="16.00022">
    <tag k="natural" v="tree"/>
  </node>
  <way id="100">
    <nd ref="1"/>
    <nd ref="2"/>
    <nd ref="3"/>
    <nd ref="4"/>
    <tag k="highway" v="residential"/>
  </way>
  <way id="101">
    <nd ref="5"/>
    <nd ref="6"/>
    <nd ref="7"/>
    <nd ref="8"/>
    <nd ref="5"/>
    <tag k="building" v="yes"/>
  </way>
</osm>
"#;

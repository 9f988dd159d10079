//! Recall metrics over predicted and ground-truth poses in map meters.

use crate::embed::NeuralMap;
use crate::error::{Error, Result};
use crate::fusion::Pose;
use crate::util::circular_distance_deg;
use std::fmt;

/// Pose in the map's metric frame: meters east/north of the anchor, heading
/// in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricPose {
    pub east_m: f64,
    pub north_m: f64,
    pub theta_deg: f64,
}

/// Converts a pixel-indexed pose to the metric frame of `map`, placing it at
/// the pixel center.
pub fn pose_to_metric(pose: &Pose, map: &NeuralMap) -> MetricPose {
    MetricPose {
        east_m: map.east_of_col(pose.u as f64),
        north_m: map.north_of_row(pose.v as f64),
        theta_deg: pose.theta_deg,
    }
}

/// Euclidean position error in meters.
pub fn position_error_m(pred: &MetricPose, gt: &MetricPose) -> f64 {
    (pred.east_m - gt.east_m).hypot(pred.north_m - gt.north_m)
}

/// Heading error in degrees along the shorter way around the circle.
pub fn orientation_error_deg(pred: &MetricPose, gt: &MetricPose) -> f64 {
    circular_distance_deg(pred.theta_deg, gt.theta_deg)
}

/// Error thresholds a prediction must not exceed to count as recalled.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallThresholds {
    pub position_m: Vec<f64>,
    pub orientation_deg: Vec<f64>,
}

impl Default for RecallThresholds {
    fn default() -> Self {
        Self { position_m: vec![1.0, 3.0, 5.0], orientation_deg: vec![1.0, 3.0, 5.0] }
    }
}

/// Fraction of predictions within each threshold (inclusive).
#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub n: usize,
    /// `(threshold in meters, recall)` pairs.
    pub position: Vec<(f64, f64)>,
    /// `(threshold in degrees, recall)` pairs.
    pub orientation: Vec<(f64, f64)>,
}

impl RecallReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,threshold,recall,n\n");
        for &(t, r) in &self.position {
            out.push_str(&format!("position,{t},{r},{}\n", self.n));
        }
        for &(t, r) in &self.orientation {
            out.push_str(&format!("orientation,{t},{r},{}\n", self.n));
        }
        out
    }
}

impl fmt::Display for RecallReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n = {}", self.n)?;
        for &(t, r) in &self.position {
            writeln!(f, "recall @ {t} m: {r:.4}")?;
        }
        for &(t, r) in &self.orientation {
            writeln!(f, "recall @ {t} deg: {r:.4}")?;
        }
        Ok(())
    }
}

/// Computes recall of `pred` against `gt`, pairing entries by index.
pub fn recall(
    pred: &[MetricPose],
    gt: &[MetricPose],
    thresholds: &RecallThresholds,
) -> Result<RecallReport> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "{} predictions against {} ground-truth poses",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Input("recall over an empty pose set".into()));
    }
    let n = pred.len();
    let frac = |errs: &[f64], t: f64| errs.iter().filter(|&&e| e <= t).count() as f64 / n as f64;
    let pos_errs: Vec<f64> =
        pred.iter().zip(gt).map(|(p, g)| position_error_m(p, g)).collect();
    let ori_errs: Vec<f64> =
        pred.iter().zip(gt).map(|(p, g)| orientation_error_deg(p, g)).collect();
    Ok(RecallReport {
        n,
        position: thresholds.position_m.iter().map(|&t| (t, frac(&pos_errs, t))).collect(),
        orientation: thresholds.orientation_deg.iter().map(|&t| (t, frac(&ori_errs, t))).collect(),
    })
}

/// Parses pose lines of the form `id east_m north_m theta_deg`, one per line.
/// Blank lines and `#` comments are skipped.
pub fn parse_pose_lines(text: &str) -> Result<Vec<(String, MetricPose)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "line {}: expected `id east_m north_m theta_deg`, got {} fields",
                ln + 1,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("line {}: bad number {s:?}", ln + 1)))
        };
        out.push((
            fields[0].to_string(),
            MetricPose { east_m: num(fields[1])?, north_m: num(fields[2])?, theta_deg: num(fields[3])? },
        ));
    }
    Ok(out)
}

/// Formats pose lines in the format accepted by [`parse_pose_lines`].
pub fn format_pose_lines(poses: &[(String, MetricPose)]) -> String {
    let mut out = String::new();
    for (id, p) in poses {
        out.push_str(&format!("{id} {} {} {}\n", p.east_m, p.north_m, p.theta_deg));
    }
    out
}

/// Pairs predictions with ground truth by id. Every prediction must have a
/// ground-truth partner; unmatched ground-truth entries are ignored.
pub fn join_by_id(
    pred: &[(String, MetricPose)],
    gt: &[(String, MetricPose)],
) -> Result<(Vec<MetricPose>, Vec<MetricPose>)> {
    let mut pairs = Vec::with_capacity(pred.len());
    for (id, p) in pred {
        let g = gt
            .iter()
            .find(|(gid, _)| gid == id)
            .ok_or_else(|| Error::Lookup(format!("no ground-truth pose with id {id:?}")))?;
        pairs.push((*p, g.1));
    }
    Ok(pairs.into_iter().unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mp(e: f64, n: f64, t: f64) -> MetricPose {
        MetricPose { east_m: e, north_m: n, theta_deg: t }
    }

    #[test]
    fn recall_counts_inclusive_thresholds() {
        let gt = vec![mp(0.0, 0.0, 0.0); 4];
        let pred = vec![
            mp(0.0, 0.0, 0.0),   // exact
            mp(1.0, 0.0, 3.0),   // exactly on both 1 m and 3 deg thresholds
            mp(0.0, 4.0, -5.0),  // within 5 m / 5 deg only
            mp(8.0, 0.0, 90.0),  // outside everything
        ];
        let r = recall(&pred, &gt, &RecallThresholds::default()).unwrap();
        assert_eq!(r.n, 4);
        assert_eq!(r.position, vec![(1.0, 0.5), (3.0, 0.5), (5.0, 0.75)]);
        assert_eq!(r.orientation, vec![(1.0, 0.25), (3.0, 0.5), (5.0, 0.75)]);
    }

    #[test]
    fn orientation_error_takes_the_short_way_around() {
        assert_eq!(orientation_error_deg(&mp(0.0, 0.0, 179.0), &mp(0.0, 0.0, -179.0)), 2.0);
        assert_eq!(orientation_error_deg(&mp(0.0, 0.0, -170.0), &mp(0.0, 0.0, 170.0)), 20.0);
        assert_eq!(orientation_error_deg(&mp(0.0, 0.0, 180.0), &mp(0.0, 0.0, 0.0)), 180.0);
        let r = recall(
            &[mp(0.0, 0.0, 178.0)],
            &[mp(0.0, 0.0, -178.0)],
            &RecallThresholds { position_m: vec![1.0], orientation_deg: vec![4.0] },
        )
        .unwrap();
        assert_eq!(r.orientation, vec![(4.0, 1.0)]);
    }

    #[test]
    fn csv_report_has_one_row_per_threshold() {
        let r = recall(
            &[mp(0.0, 0.0, 0.0), mp(2.0, 0.0, 10.0)],
            &[mp(0.0, 0.0, 0.0), mp(0.0, 0.0, 0.0)],
            &RecallThresholds::default(),
        )
        .unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,threshold,recall,n");
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[1], "position,1,0.5,2");
        assert_eq!(lines[5], "orientation,3,0.5,2");
    }

    #[test]
    fn pose_lines_round_trip_and_join_by_id() {
        let text = "# header comment\nq1 1.5 -2.25 90\n\nq2 0 0 -179.5\n";
        let poses = parse_pose_lines(text).unwrap();
        assert_eq!(poses.len(), 2);
        assert_eq!(poses[0].0, "q1");
        assert_eq!(poses[0].1, mp(1.5, -2.25, 90.0));
        let round = parse_pose_lines(&format_pose_lines(&poses)).unwrap();
        assert_eq!(round, poses);

        let gt = vec![("q2".to_string(), mp(0.0, 0.0, 180.0)), ("q1".to_string(), mp(1.0, -2.0, 88.0))];
        let (p, g) = join_by_id(&poses, &gt).unwrap();
        assert_eq!(g[0], mp(1.0, -2.0, 88.0));
        assert_eq!(g[1], mp(0.0, 0.0, 180.0));
        assert_eq!(p[0], poses[0].1);

        assert!(matches!(
            join_by_id(&poses, &gt[..1]).unwrap_err(),
            Error::Lookup(_)
        ));
        assert!(matches!(parse_pose_lines("q1 1 2").unwrap_err(), Error::Format(_)));
        assert!(matches!(parse_pose_lines("q1 1 2 x").unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn mismatched_or_empty_inputs_are_rejected() {
        let a = vec![mp(0.0, 0.0, 0.0)];
        assert!(recall(&a, &[], &RecallThresholds::default()).is_err());
        assert!(recall(&[], &[], &RecallThresholds::default()).is_err());
    }

    proptest! {
        // Recall is monotone in the threshold and bounded by [0, 1], for any
        // error distribution and any circular headings.
        #[test]
        fn recall_is_monotone_in_the_threshold(
            seeds in proptest::collection::vec((0.0f64..20.0, 0.0f64..360.0, -720.0f64..720.0, -720.0f64..720.0), 1..40),
            t1 in 0.0f64..25.0,
            t2 in 0.0f64..25.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let gt: Vec<MetricPose> =
                seeds.iter().map(|&(_, _, _, g)| mp(0.0, 0.0, g)).collect();
            let pred: Vec<MetricPose> = seeds
                .iter()
                .map(|&(r, az, p, _)| {
                    mp(r * az.to_radians().sin(), r * az.to_radians().cos(), p)
                })
                .collect();
            let th = RecallThresholds { position_m: vec![lo, hi], orientation_deg: vec![lo, hi] };
            let rep = recall(&pred, &gt, &th).unwrap();
            prop_assert!(rep.position[0].1 <= rep.position[1].1);
            prop_assert!(rep.orientation[0].1 <= rep.orientation[1].1);
            for &(_, r) in rep.position.iter().chain(&rep.orientation) {
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }
    }
}

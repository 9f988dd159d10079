//! Metric rasterization of classified map elements.
//!
//! The raster is square, north-up, anchored so that the anchor coordinate
//! falls at the exact center of the image. Pixel `(row, col)` covers the
//! half-open square `[col, col+1) × [row, row+1)` in continuous pixel
//! coordinates; its center therefore sits at `(col + 0.5, row + 0.5)`.
//! Geometry outside the extent is clipped silently.

use super::{ClassifiedElement, ElementGeometry, GeoPoint, CHANNELS};
use crate::error::{Error, Result};

/// Per-channel class-index raster of a map extent.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterMap {
    pub width: usize,
    pub height: usize,
    pub meters_per_px: f64,
    pub anchor: GeoPoint,
    /// Channel-major class indices: `classes[(ch * height + y) * width + x]`.
    pub classes: Vec<u16>,
}

impl RasterMap {
    pub fn zeros(width: usize, height: usize, meters_per_px: f64, anchor: GeoPoint) -> Self {
        Self { width, height, meters_per_px, anchor, classes: vec![0; CHANNELS * height * width] }
    }

    #[inline]
    pub fn index(&self, channel: usize, y: usize, x: usize) -> usize {
        (channel * self.height + y) * self.width + x
    }

    #[inline]
    pub fn class_at(&self, channel: usize, y: usize, x: usize) -> u16 {
        self.classes[self.index(channel, y, x)]
    }

    /// East offset in meters of a column's center from the anchor.
    pub fn east_of_col(&self, col: f64) -> f64 {
        (col + 0.5 - self.width as f64 / 2.0) * self.meters_per_px
    }

    /// North offset in meters of a row's center from the anchor.
    pub fn north_of_row(&self, row: f64) -> f64 {
        (self.height as f64 / 2.0 - row - 0.5) * self.meters_per_px
    }

    /// Continuous column coordinate (0 at the center of column 0) of an east
    /// offset in meters.
    pub fn col_of_east(&self, east_m: f64) -> f64 {
        east_m / self.meters_per_px + self.width as f64 / 2.0 - 0.5
    }

    /// Continuous row coordinate of a north offset in meters.
    pub fn row_of_north(&self, north_m: f64) -> f64 {
        self.height as f64 / 2.0 - 0.5 - north_m / self.meters_per_px
    }

    fn stamp(&mut self, channel: usize, class: u16, x: i64, y: i64) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = self.index(channel, y as usize, x as usize);
            self.classes[i] = class;
        }
    }

    fn fill_polygon(&mut self, channel: usize, class: u16, pts: &[(f64, f64)]) {
        if pts.len() < 3 {
            return;
        }
        let (ymin, ymax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
        let r0 = ((ymin - 0.5).ceil() as i64).max(0);
        let r1 = (((ymax - 0.5).ceil() as i64) - 1).min(self.height as i64 - 1);
        let mut xs: Vec<f64> = Vec::new();
        for r in r0..=r1 {
            let yc = r as f64 + 0.5;
            xs.clear();
            for (a, b) in edges(pts) {
                // Half-open edge rule: each scanline crossing counts once.
                if (a.1 <= yc && yc < b.1) || (b.1 <= yc && yc < a.1) {
                    xs.push(a.0 + (yc - a.1) * (b.0 - a.0) / (b.1 - a.1));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // Fill pixel centers in [pair[0], pair[1]).
                let c0 = ((pair[0] - 0.5).ceil() as i64).max(0);
                let c1 = (((pair[1] - 0.5).ceil() as i64) - 1).min(self.width as i64 - 1);
                for c in c0..=c1 {
                    self.stamp(channel, class, c, r);
                }
            }
        }
    }

    fn stamp_polyline(&mut self, channel: usize, class: u16, pts: &[(f64, f64)]) {
        for (a, b) in pts.iter().zip(pts.iter().skip(1)) {
            let Some((x0, y0, x1, y1)) =
                clip_segment(a.0, a.1, b.0, b.1, self.width as f64, self.height as f64)
            else {
                continue;
            };
            let to_px = |v: f64, max: usize| (v.floor() as i64).clamp(0, max as i64 - 1);
            self.stamp_segment(
                channel,
                class,
                to_px(x0, self.width),
                to_px(y0, self.height),
                to_px(x1, self.width),
                to_px(y1, self.height),
            );
        }
    }

    /// One-pixel-wide integer line between two in-bounds endpoints.
    fn stamp_segment(&mut self, channel: usize, class: u16, x0: i64, y0: i64, x1: i64, y1: i64) {
        let dx = (x1 - x0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let dy = -(y1 - y0).abs();
        let sy = if y0 < y1 { 1 } else { -1 };
        let (mut x, mut y) = (x0, y0);
        let mut err = dx + dy;
        loop {
            self.stamp(channel, class, x, y);
            if x == x1 && y == y1 {
                return;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

fn edges(pts: &[(f64, f64)]) -> impl Iterator<Item = (&(f64, f64), &(f64, f64))> {
    pts.iter().zip(pts.iter().cycle().skip(1)).take(pts.len())
}

/// Liang–Barsky clip of a segment to `[0, w] × [0, h]`.
fn clip_segment(x0: f64, y0: f64, x1: f64, y1: f64, w: f64, h: f64) -> Option<(f64, f64, f64, f64)> {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for (p, q) in [(-dx, x0), (dx, w - x0), (-dy, y0), (dy, h - y0)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                if r > t1 {
                    return None;
                }
                t0 = t0.max(r);
            } else {
                if r < t0 {
                    return None;
                }
                t1 = t1.min(r);
            }
        }
    }
    Some((x0 + t0 * dx, y0 + t0 * dy, x0 + t1 * dx, y0 + t1 * dy))
}

/// Rasterizes classified elements into a square `extent_m`-wide raster
/// centered on `anchor`. Elements are drawn in order, so within a channel a
/// later element overwrites earlier ones where they overlap.
pub fn rasterize(
    elements: &[ClassifiedElement],
    anchor: GeoPoint,
    extent_m: f64,
    meters_per_px: f64,
) -> Result<RasterMap> {
    if !(extent_m > 0.0) || !(meters_per_px > 0.0) {
        return Err(Error::Input(format!(
            "raster extent {extent_m} m and resolution {meters_per_px} m/px must be positive"
        )));
    }
    let side = (extent_m / meters_per_px).round() as usize;
    if side == 0 {
        return Err(Error::Input(format!(
            "extent {extent_m} m is below one pixel at {meters_per_px} m/px"
        )));
    }
    let mut map = RasterMap::zeros(side, side, meters_per_px, anchor);
    let half = side as f64 / 2.0;
    let project = |p: &GeoPoint| {
        let (east, north) = p.local_meters(&anchor);
        (east / meters_per_px + half, half - north / meters_per_px)
    };
    for elem in elements {
        if elem.channel >= CHANNELS {
            return Err(Error::Input(format!(
                "element channel {} out of range 0..{CHANNELS}",
                elem.channel
            )));
        }
        if elem.class_index == 0 || elem.class_index > u16::MAX as usize {
            return Err(Error::Input(format!(
                "class index {} of `{}` cannot be stamped",
                elem.class_index, elem.class
            )));
        }
        let class = elem.class_index as u16;
        match &elem.geometry {
            ElementGeometry::Area(pts) => {
                let px: Vec<(f64, f64)> = pts.iter().map(&project).collect();
                map.fill_polygon(elem.channel, class, &px);
            }
            ElementGeometry::Line(pts) => {
                let px: Vec<(f64, f64)> = pts.iter().map(&project).collect();
                map.stamp_polyline(elem.channel, class, &px);
            }
            ElementGeometry::Point(p) => {
                let (x, y) = project(p);
                let (xi, yi) = (x.floor() as i64, y.floor() as i64);
                // No clamp: a point outside the extent is dropped.
                map.stamp(elem.channel, class, xi, yi);
            }
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::super::{classify, parse_osm, ClassTable, AREA_CHANNEL, LINE_CHANNEL, POINT_CHANNEL};
    use super::*;

    const ANCHOR: GeoPoint = GeoPoint { lat_deg: 48.2, lon_deg: 16.37 };

    fn geo(east: f64, north: f64) -> GeoPoint {
        GeoPoint::from_local_meters(east, north, &ANCHOR)
    }

    fn area(class_index: usize, corners: &[(f64, f64)]) -> ClassifiedElement {
        ClassifiedElement {
            channel: AREA_CHANNEL,
            class_index,
            class: format!("class{class_index}"),
            geometry: ElementGeometry::Area(corners.iter().map(|&(e, n)| geo(e, n)).collect()),
        }
    }

    fn line(class_index: usize, pts: &[(f64, f64)]) -> ClassifiedElement {
        ClassifiedElement {
            channel: LINE_CHANNEL,
            class_index,
            class: format!("class{class_index}"),
            geometry: ElementGeometry::Line(pts.iter().map(|&(e, n)| geo(e, n)).collect()),
        }
    }

    fn point(class_index: usize, east: f64, north: f64) -> ClassifiedElement {
        ClassifiedElement {
            channel: POINT_CHANNEL,
            class_index,
            class: format!("class{class_index}"),
            geometry: ElementGeometry::Point(geo(east, north)),
        }
    }

    #[test]
    fn centered_square_building_fills_the_exact_pixel_block() {
        let b = area(1, &[(-5.0, -5.0), (5.0, -5.0), (5.0, 5.0), (-5.0, 5.0)]);
        let map = rasterize(&[b], ANCHOR, 20.0, 0.5).unwrap();
        assert_eq!((map.width, map.height), (40, 40));
        let mut filled = 0;
        for y in 0..40 {
            for x in 0..40 {
                let expect = (10..30).contains(&x) && (10..30).contains(&y);
                let got = map.class_at(AREA_CHANNEL, y, x) == 1;
                assert_eq!(got, expect, "pixel ({x},{y})");
                filled += got as usize;
            }
        }
        assert_eq!(filled, 400);
        assert!(map.classes[map.index(LINE_CHANNEL, 20, 20)] == 0);
    }

    #[test]
    fn anchor_point_lands_on_the_center_pixel() {
        let map = rasterize(&[point(2, 0.0, 0.0)], ANCHOR, 20.0, 0.5).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                let expect = (x, y) == (20, 20);
                assert_eq!(map.class_at(POINT_CHANNEL, y, x) == 2, expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn horizontal_road_stamps_one_pixel_row() {
        let map = rasterize(&[line(1, &[(-3.9, 1.1), (3.9, 1.1)])], ANCHOR, 20.0, 0.5).unwrap();
        // north = 1.1 m → continuous y = 17.8 → row 17.
        for y in 0..40 {
            for x in 0..40 {
                let expect = y == 17 && (12..=27).contains(&x);
                assert_eq!(map.class_at(LINE_CHANNEL, y, x) == 1, expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn scanline_fill_matches_even_odd_point_in_polygon() {
        // A bowtie, a convex quad and an L-shape, with vertices placed off
        // the pixel lattice.
        let polys: [&[(f64, f64)]; 3] = [
            &[(-3.3, -2.1), (3.1, 2.4), (3.1, -2.1), (-3.3, 2.4)],
            &[(-4.2, -1.1), (4.4, -3.3), (5.1, 4.2), (-3.8, 3.7)],
            &[(-4.1, -4.2), (1.3, -4.2), (1.3, 1.1), (4.2, 1.1), (4.2, 3.9), (-4.1, 3.9)],
        ];
        for pts in polys {
            let map = rasterize(&[area(1, pts)], ANCHOR, 24.0, 0.5).unwrap();
            let px: Vec<(f64, f64)> = pts
                .iter()
                .map(|&(e, n)| {
                    (e / 0.5 + map.width as f64 / 2.0, map.height as f64 / 2.0 - n / 0.5)
                })
                .collect();
            let mut any = false;
            for y in 0..map.height {
                for x in 0..map.width {
                    let (xc, yc) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut crossings = 0;
                    for (a, b) in edges(&px) {
                        if (a.1 <= yc && yc < b.1) || (b.1 <= yc && yc < a.1) {
                            let xi = a.0 + (yc - a.1) * (b.0 - a.0) / (b.1 - a.1);
                            crossings += (xi <= xc) as usize;
                        }
                    }
                    let expect = crossings % 2 == 1;
                    any |= expect;
                    assert_eq!(
                        map.class_at(AREA_CHANNEL, y, x) == 1,
                        expect,
                        "pixel ({x},{y})"
                    );
                }
            }
            assert!(any, "oracle filled nothing; fixture is broken");
        }
    }

    #[test]
    fn later_elements_overwrite_earlier_ones_in_the_same_channel() {
        let a = area(1, &[(-5.0, -5.0), (1.0, -5.0), (1.0, 5.0), (-5.0, 5.0)]);
        let b = area(2, &[(-1.0, -5.0), (5.0, -5.0), (5.0, 5.0), (-1.0, 5.0)]);
        let map = rasterize(&[a, b], ANCHOR, 20.0, 0.5).unwrap();
        // Overlap band east ∈ [-1, 1] belongs to the later element.
        assert_eq!(map.class_at(AREA_CHANNEL, 20, 20), 2);
        assert_eq!(map.class_at(AREA_CHANNEL, 20, 12), 1);
        assert_eq!(map.class_at(AREA_CHANNEL, 20, 27), 2);
    }

    #[test]
    fn geometry_outside_the_extent_is_clipped_silently() {
        let elems = [
            line(1, &[(-50.0, 0.0), (50.0, 0.0)]),  // crosses the whole raster
            line(2, &[(30.0, 30.0), (60.0, 30.0)]), // fully outside
            point(1, 11.0, 0.0),                    // outside
            area(3, &[(8.0, -2.0), (14.0, -2.0), (14.0, 2.0), (8.0, 2.0)]), // partial
        ];
        let map = rasterize(&elems, ANCHOR, 20.0, 0.5).unwrap();
        for x in 0..40 {
            assert_eq!(map.class_at(LINE_CHANNEL, 20, x), 1);
        }
        let line_block = &map.classes[40 * 40..2 * 40 * 40];
        assert!(line_block.iter().all(|&c| c != 2), "outside line must not stamp");
        assert!(map
            .classes
            .iter()
            .skip(2 * 40 * 40)
            .all(|&c| c == 0), "clipped point must not stamp");
        // The partial area fills east ∈ [8, 10) only.
        for x in 0..40 {
            let expect = (36..40).contains(&x);
            assert_eq!(map.class_at(AREA_CHANNEL, 18, x) == 3, expect, "col {x}");
        }
    }

    #[test]
    fn rasterization_is_translation_equivariant() {
        let base: Vec<ClassifiedElement> = vec![
            area(1, &[(-4.3, -3.1), (2.7, -3.1), (2.7, 1.9), (-4.3, 1.9)]),
            line(2, &[(-5.5, 4.2), (5.5, -4.8)]),
            point(1, 3.4, 3.6),
        ];
        // Shift everything by an exact pixel multiple (east 2 px, north -3 px).
        let (de, dn) = (2.0 * 0.5, -3.0 * 0.5);
        let shifted: Vec<ClassifiedElement> = base
            .iter()
            .map(|e| {
                let mv = |p: &GeoPoint| {
                    let (east, north) = p.local_meters(&ANCHOR);
                    geo(east + de, north + dn)
                };
                let geometry = match &e.geometry {
                    ElementGeometry::Area(ps) => ElementGeometry::Area(ps.iter().map(mv).collect()),
                    ElementGeometry::Line(ps) => ElementGeometry::Line(ps.iter().map(mv).collect()),
                    ElementGeometry::Point(p) => ElementGeometry::Point(mv(p)),
                };
                ClassifiedElement { geometry, ..e.clone() }
            })
            .collect();
        let a = rasterize(&base, ANCHOR, 32.0, 0.5).unwrap();
        let b = rasterize(&shifted, ANCHOR, 32.0, 0.5).unwrap();
        let (w, h) = (a.width as i64, a.height as i64);
        let mut compared = 0usize;
        for ch in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = (x + 2, y + 3); // north shift of -3 px moves content down
                    if sx < 0 || sy < 0 || sx >= w || sy >= h {
                        continue;
                    }
                    assert_eq!(
                        a.class_at(ch, y as usize, x as usize),
                        b.class_at(ch, sy as usize, sx as usize),
                        "channel {ch} pixel ({x},{y})"
                    );
                    compared += 1;
                }
            }
        }
        assert!(compared > 2500);
    }

    #[test]
    fn parse_classify_rasterize_pipeline_runs_end_to_end() {
        let m = 1e-4; // ≈ 11.1 m of latitude
        let xml = format!(
            r#"<osm>
  <node id="1" lat="{a}" lon="{b}"/>
  <node id="2" lat="{a}" lon="{c}"/>
  <node id="3" lat="{d}" lon="{c}"/>
  <node id="4" lat="{d}" lon="{b}"/>
  <node id="5" lat="48.20005" lon="16.37" >
    <tag k="natural" v="tree"/>
  </node>
  <way id="10">
    <nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="4"/><nd ref="1"/>
    <tag k="building" v="apartments"/>
  </way>
  <way id="11">
    <nd ref="1"/><nd ref="3"/>
    <tag k="highway" v="service"/>
  </way>
</osm>"#,
            a = 48.2 - m,
            b = 16.37 - m,
            c = 16.37 + m,
            d = 48.2 + m,
        );
        let scene = parse_osm(&xml).unwrap();
        let table = ClassTable::default_table();
        let elems = classify(&scene, &table).unwrap();
        let map = rasterize(&elems, ANCHOR, 40.0, 0.5).unwrap();
        let building = table.class_index(AREA_CHANNEL, "building").unwrap() as u16;
        let road = table.class_index(LINE_CHANNEL, "road").unwrap() as u16;
        let tree = table.class_index(POINT_CHANNEL, "tree").unwrap() as u16;
        assert_eq!(map.class_at(AREA_CHANNEL, 40, 40), building);
        assert!(map.classes.iter().take(80 * 80).any(|&c| c == building));
        assert!(map
            .classes
            .iter()
            .skip(80 * 80)
            .take(80 * 80)
            .any(|&c| c == road));
        // Tree at ~5.6 m north of the anchor; recompute its pixel with the
        // same corner-coordinate floor rule the rasterizer uses.
        let (te, tn) = scene.nodes[4].point.local_meters(&ANCHOR);
        let col = (te / 0.5 + 40.0).floor() as usize;
        let row = (40.0 - tn / 0.5).floor() as usize;
        assert_eq!(map.class_at(POINT_CHANNEL, row, col), tree);
    }
}

//! Vector map handling: OSM-style XML parsing, tag classification into the
//! three semantic channels, and metric rasterization.
//!
//! Channel 0 holds area classes (filled polygons), channel 1 line classes
//! (stamped polylines), channel 2 point classes. Class index 0 of every
//! channel is the background.

mod raster;
mod xml;

pub use raster::{rasterize, RasterMap};
pub use xml::parse_osm;

use crate::error::{Error, Result};
use std::collections::HashMap;

/// Semantic raster channel count.
pub const CHANNELS: usize = 3;
pub const AREA_CHANNEL: usize = 0;
pub const LINE_CHANNEL: usize = 1;
pub const POINT_CHANNEL: usize = 2;

/// Meters per degree of latitude (WGS84 equatorial radius).
pub const METERS_PER_DEG: f64 = 111_319.490_793_273_58;

/// Geographic coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Self {
        Self { lat_deg, lon_deg }
    }

    /// Local tangent-plane offset (east, north) in meters from `anchor`,
    /// using the equirectangular approximation with the anchor's latitude
    /// scaling. Adequate for the few-hundred-meter extents handled here.
    pub fn local_meters(&self, anchor: &GeoPoint) -> (f64, f64) {
        let east =
            (self.lon_deg - anchor.lon_deg) * anchor.lat_deg.to_radians().cos() * METERS_PER_DEG;
        let north = (self.lat_deg - anchor.lat_deg) * METERS_PER_DEG;
        (east, north)
    }

    /// Inverse of [`GeoPoint::local_meters`].
    pub fn from_local_meters(east: f64, north: f64, anchor: &GeoPoint) -> Self {
        Self {
            lat_deg: anchor.lat_deg + north / METERS_PER_DEG,
            lon_deg: anchor.lon_deg
                + east / (METERS_PER_DEG * anchor.lat_deg.to_radians().cos()),
        }
    }
}

/// A tagged map node.
#[derive(Debug, Clone, PartialEq)]
pub struct OsmNode {
    pub id: i64,
    pub point: GeoPoint,
    pub tags: Vec<(String, String)>,
}

/// A tagged map way referencing nodes by id.
#[derive(Debug, Clone, PartialEq)]
pub struct OsmWay {
    pub id: i64,
    pub node_refs: Vec<i64>,
    pub tags: Vec<(String, String)>,
}

/// Parsed map scene.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OsmScene {
    pub nodes: Vec<OsmNode>,
    pub ways: Vec<OsmWay>,
}

impl OsmScene {
    /// Checks that every way reference resolves; names the first missing id.
    pub fn validate(&self) -> Result<()> {
        let ids: std::collections::HashSet<i64> = self.nodes.iter().map(|n| n.id).collect();
        if ids.len() != self.nodes.len() {
            let mut seen = std::collections::HashSet::new();
            for n in &self.nodes {
                if !seen.insert(n.id) {
                    return Err(Error::Validation(format!("duplicate node id {}", n.id)));
                }
            }
        }
        for w in &self.ways {
            for r in &w.node_refs {
                if !ids.contains(r) {
                    return Err(Error::Validation(format!(
                        "way {} references missing node {r}",
                        w.id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn tag_value<'a>(tags: &'a [(String, String)], key: &str) -> Option<&'a str> {
    tags.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

// ── classification rules ────────────────────────────────────────────────────

/// One `key=value -> channel:class` mapping; `value` may be the wildcard `*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRule {
    pub key: String,
    pub value: String,
    pub channel: usize,
    pub class: String,
}

impl ClassRule {
    fn matches(&self, tags: &[(String, String)]) -> bool {
        match tag_value(tags, &self.key) {
            Some(v) => self.value == "*" || self.value == v,
            None => false,
        }
    }
}

/// Ordered rule list plus the per-channel class vocabulary it induces.
///
/// Class names get indices in rule order, per channel, starting at 1
/// (index 0 is the background).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    pub rules: Vec<ClassRule>,
    /// `classes[channel][index]` is the class name; entry 0 is `background`.
    pub classes: [Vec<String>; CHANNELS],
}

impl ClassTable {
    pub fn from_rules(rules: Vec<ClassRule>) -> Result<Self> {
        let mut classes: [Vec<String>; CHANNELS] =
            std::array::from_fn(|_| vec!["background".to_string()]);
        let mut seen: HashMap<(String, String), (usize, String)> = HashMap::new();
        for r in &rules {
            if r.channel >= CHANNELS {
                return Err(Error::Config(format!(
                    "rule {}={} names channel {}, only 0..={} exist",
                    r.key,
                    r.value,
                    r.channel,
                    CHANNELS - 1
                )));
            }
            if r.class == "background" {
                return Err(Error::Config("the class name `background` is reserved".into()));
            }
            // The same tag must not be routed two different ways.
            if let Some((ch, class)) =
                seen.insert((r.key.clone(), r.value.clone()), (r.channel, r.class.clone()))
            {
                if ch != r.channel || class != r.class {
                    return Err(Error::Config(format!(
                        "conflicting rules for {}={}: channel {ch} class `{class}` vs channel {} class `{}`",
                        r.key, r.value, r.channel, r.class
                    )));
                }
            }
            // Tags the default vocabulary knows to be areas cannot become
            // point features; that always signals a typo in the rules file.
            if r.channel == POINT_CHANNEL && default_area_tag(&r.key, &r.value) {
                return Err(Error::Config(format!(
                    "rule maps the area tag {}={} to the points channel",
                    r.key, r.value
                )));
            }
            if !classes[r.channel].iter().any(|c| c == &r.class) {
                classes[r.channel].push(r.class.clone());
            }
        }
        Ok(Self { rules, classes })
    }

    /// The built-in vocabulary: four area classes (building, parking, grass,
    /// water), four line classes (road, path, rail, fence) and three point
    /// classes (tree, pole, crossing).
    pub fn default_table() -> Self {
        Self::from_rules(default_rules()).expect("built-in rules are consistent")
    }

    /// Parses the `key=value -> channel:class` rules format; `#` starts a
    /// comment and blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| {
                Error::Config(format!("rules line {}: {what} in `{raw}`", ln + 1))
            };
            let (tag, target) = line.split_once("->").ok_or_else(|| bad("missing `->`"))?;
            let (key, value) = tag.trim().split_once('=').ok_or_else(|| bad("missing `=`"))?;
            let (channel, class) =
                target.trim().split_once(':').ok_or_else(|| bad("missing `:`"))?;
            let channel: usize =
                channel.trim().parse().map_err(|_| bad("channel is not a number"))?;
            let (key, value, class) = (key.trim(), value.trim(), class.trim());
            if key.is_empty() || value.is_empty() || class.is_empty() {
                return Err(bad("empty field"));
            }
            rules.push(ClassRule {
                key: key.to_string(),
                value: value.to_string(),
                channel,
                class: class.to_string(),
            });
        }
        Self::from_rules(rules)
    }

    /// Index of a class name within a channel, if present.
    pub fn class_index(&self, channel: usize, class: &str) -> Option<usize> {
        self.classes.get(channel)?.iter().position(|c| c == class)
    }

    /// Non-background class count of a channel.
    pub fn class_count(&self, channel: usize) -> usize {
        self.classes[channel].len() - 1
    }
}

fn default_rules() -> Vec<ClassRule> {
    let mk = |key: &str, value: &str, channel: usize, class: &str| ClassRule {
        key: key.into(),
        value: value.into(),
        channel,
        class: class.into(),
    };
    vec![
        mk("building", "*", AREA_CHANNEL, "building"),
        mk("amenity", "parking", AREA_CHANNEL, "parking"),
        mk("landuse", "grass", AREA_CHANNEL, "grass"),
        mk("leisure", "park", AREA_CHANNEL, "grass"),
        mk("natural", "water", AREA_CHANNEL, "water"),
        mk("landuse", "reservoir", AREA_CHANNEL, "water"),
        mk("highway", "residential", LINE_CHANNEL, "road"),
        mk("highway", "primary", LINE_CHANNEL, "road"),
        mk("highway", "secondary", LINE_CHANNEL, "road"),
        mk("highway", "tertiary", LINE_CHANNEL, "road"),
        mk("highway", "service", LINE_CHANNEL, "road"),
        mk("highway", "unclassified", LINE_CHANNEL, "road"),
        mk("highway", "footway", LINE_CHANNEL, "path"),
        mk("highway", "path", LINE_CHANNEL, "path"),
        mk("highway", "cycleway", LINE_CHANNEL, "path"),
        mk("railway", "rail", LINE_CHANNEL, "rail"),
        mk("railway", "tram", LINE_CHANNEL, "rail"),
        mk("barrier", "fence", LINE_CHANNEL, "fence"),
        mk("barrier", "wall", LINE_CHANNEL, "fence"),
        mk("natural", "tree", POINT_CHANNEL, "tree"),
        mk("highway", "street_lamp", POINT_CHANNEL, "pole"),
        mk("power", "pole", POINT_CHANNEL, "pole"),
        mk("highway", "crossing", POINT_CHANNEL, "crossing"),
    ]
}

/// True when the default vocabulary maps this tag to the areas channel.
fn default_area_tag(key: &str, value: &str) -> bool {
    default_rules().iter().any(|r| {
        r.channel == AREA_CHANNEL
            && r.key == key
            && (r.value == "*" || value == "*" || r.value == value)
    })
}

// ── classified geometry ─────────────────────────────────────────────────────

/// Geometry of a classified element, already reduced to coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum ElementGeometry {
    /// Polygon vertices without the repeated closing vertex.
    Area(Vec<GeoPoint>),
    /// Polyline vertices (closed rings keep their repeated end vertex).
    Line(Vec<GeoPoint>),
    Point(GeoPoint),
}

/// A map element routed to exactly one (channel, class) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedElement {
    pub channel: usize,
    pub class_index: usize,
    pub class: String,
    pub geometry: ElementGeometry,
}

/// Routes every scene element to its first applicable rule.
///
/// Area rules apply to closed ways, line rules to any way, point rules to
/// tagged nodes; elements matching no applicable rule are dropped.
pub fn classify(scene: &OsmScene, table: &ClassTable) -> Result<Vec<ClassifiedElement>> {
    scene.validate()?;
    let by_id: HashMap<i64, &OsmNode> = scene.nodes.iter().map(|n| (n.id, n)).collect();
    let mut out = Vec::new();

    for way in &scene.ways {
        let closed = way.node_refs.len() >= 4 && way.node_refs.first() == way.node_refs.last();
        let rule = table.rules.iter().find(|r| {
            let geometry_ok = match r.channel {
                AREA_CHANNEL => closed,
                LINE_CHANNEL => true,
                _ => false,
            };
            geometry_ok && r.matches(&way.tags)
        });
        let Some(rule) = rule else { continue };
        let mut pts: Vec<GeoPoint> =
            way.node_refs.iter().map(|r| by_id[r].point).collect();
        let geometry = if rule.channel == AREA_CHANNEL {
            pts.pop(); // drop the repeated closing vertex
            ElementGeometry::Area(pts)
        } else {
            ElementGeometry::Line(pts)
        };
        out.push(ClassifiedElement {
            channel: rule.channel,
            class_index: table
                .class_index(rule.channel, &rule.class)
                .expect("rule classes are registered"),
            class: rule.class.clone(),
            geometry,
        });
    }

    for node in &scene.nodes {
        if node.tags.is_empty() {
            continue;
        }
        let rule = table
            .rules
            .iter()
            .find(|r| r.channel == POINT_CHANNEL && r.matches(&node.tags));
        let Some(rule) = rule else { continue };
        out.push(ClassifiedElement {
            channel: POINT_CHANNEL,
            class_index: table
                .class_index(POINT_CHANNEL, &rule.class)
                .expect("rule classes are registered"),
            class: rule.class.clone(),
            geometry: ElementGeometry::Point(node.point),
        });
    }
    Ok(out)
}

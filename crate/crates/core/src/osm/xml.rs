//! Minimal XML reader for the OSM element subset (`node`, `way`, `nd`,
//! `tag`). Unknown elements are skipped; failures carry the byte offset of
//! the offending construct.

use super::{GeoPoint, OsmNode, OsmScene, OsmWay};
use crate::error::{Error, Result};

/// Parses an OSM XML document and validates its way references.
pub fn parse_osm(text: &str) -> Result<OsmScene> {
    let mut scanner = Scanner { bytes: text.as_bytes(), pos: 0 };
    let scene = scanner.document()?;
    scene.validate()?;
    Ok(scene)
}

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

/// An opened element: its name, attributes, and whether it self-closed.
struct Element {
    start: usize,
    name: String,
    attrs: Vec<(String, String)>,
    self_closing: bool,
}

impl Element {
    fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.attr(key).ok_or_else(|| Error::Parse {
            offset: self.start,
            msg: format!("<{}> lacks the `{key}` attribute", self.name),
        })?;
        raw.parse().map_err(|_| Error::Parse {
            offset: self.start,
            msg: format!("<{}> has unparseable {key}=\"{raw}\"", self.name),
        })
    }
}

impl<'a> Scanner<'a> {
    fn err<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse { offset, msg: msg.into() })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn starts_with(&self, s: &str) -> bool {
        self.bytes[self.pos..].starts_with(s.as_bytes())
    }

    /// Skips whitespace, text content, comments, and processing instructions.
    fn skip_filler(&mut self) -> Result<()> {
        loop {
            while matches!(self.peek(), Some(b) if b != b'<') {
                self.pos += 1;
            }
            if self.starts_with("<!--") {
                let start = self.pos;
                match find(self.bytes, self.pos + 4, "-->") {
                    Some(end) => self.pos = end + 3,
                    None => return self.err(start, "unterminated comment"),
                }
            } else if self.starts_with("<?") {
                let start = self.pos;
                match find(self.bytes, self.pos + 2, "?>") {
                    Some(end) => self.pos = end + 2,
                    None => return self.err(start, "unterminated processing instruction"),
                }
            } else {
                return Ok(());
            }
        }
    }

    fn name(&mut self) -> Result<String> {
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b':')
        {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err(start, "expected a name");
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b) if b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    /// Reads `<name attr="v" ...>` or `<name .../>`; `pos` must sit on `<`.
    fn open_element(&mut self) -> Result<Element> {
        let start = self.pos;
        self.pos += 1; // consume `<`
        let name = self.name()?;
        let mut attrs = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'>') => {
                    self.pos += 1;
                    return Ok(Element { start, name, attrs, self_closing: false });
                }
                Some(b'/') => {
                    if !self.starts_with("/>") {
                        return self.err(self.pos, "expected `/>`");
                    }
                    self.pos += 2;
                    return Ok(Element { start, name, attrs, self_closing: true });
                }
                Some(_) => {
                    let key = self.name()?;
                    self.skip_ws();
                    if self.peek() != Some(b'=') {
                        return self.err(self.pos, format!("attribute `{key}` lacks `=`"));
                    }
                    self.pos += 1;
                    self.skip_ws();
                    let value = self.quoted_value()?;
                    attrs.push((key, value));
                }
                None => return self.err(start, format!("unterminated <{name}> tag")),
            }
        }
    }

    fn quoted_value(&mut self) -> Result<String> {
        let quote = match self.peek() {
            Some(q @ (b'"' | b'\'')) => q,
            _ => return self.err(self.pos, "expected a quoted attribute value"),
        };
        let start = self.pos;
        self.pos += 1;
        let mut out = String::new();
        loop {
            match self.peek() {
                Some(b) if b == quote => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some(b'&') => out.push(self.entity()?),
                Some(b) => {
                    out.push(b as char);
                    self.pos += 1;
                }
                None => return self.err(start, "unterminated attribute value"),
            }
        }
    }

    fn entity(&mut self) -> Result<char> {
        let start = self.pos;
        let end = match find(self.bytes, start + 1, ";") {
            Some(e) if e - start <= 10 => e,
            _ => return self.err(start, "unterminated entity"),
        };
        let body = &self.bytes[start + 1..end];
        self.pos = end + 1;
        match body {
            b"amp" => Ok('&'),
            b"lt" => Ok('<'),
            b"gt" => Ok('>'),
            b"quot" => Ok('"'),
            b"apos" => Ok('\''),
            _ if body.first() == Some(&b'#') => {
                let digits = std::str::from_utf8(&body[1..]).unwrap_or("");
                let code = if let Some(hex) = digits.strip_prefix('x') {
                    u32::from_str_radix(hex, 16)
                } else {
                    digits.parse()
                };
                code.ok()
                    .and_then(char::from_u32)
                    .ok_or(())
                    .or_else(|_| self.err(start, "bad numeric entity"))
            }
            _ => self.err(start, "unknown entity"),
        }
    }

    /// Consumes `</name>`; `pos` must sit on `<`.
    fn close_element(&mut self, name: &str) -> Result<()> {
        let start = self.pos;
        self.pos += 2; // consume `</`
        let found = self.name()?;
        self.skip_ws();
        if self.peek() != Some(b'>') {
            return self.err(start, format!("unterminated </{found}>"));
        }
        self.pos += 1;
        if found != name {
            return self.err(start, format!("expected </{name}>, found </{found}>"));
        }
        Ok(())
    }

    /// Skips an already-opened element and everything inside it.
    fn skip_element(&mut self, elem: &Element) -> Result<()> {
        if elem.self_closing {
            return Ok(());
        }
        loop {
            self.skip_filler()?;
            if self.peek().is_none() {
                return self.err(elem.start, format!("unterminated <{}>", elem.name));
            }
            if self.starts_with("</") {
                return self.close_element(&elem.name);
            }
            let child = self.open_element()?;
            self.skip_element(&child)?;
        }
    }

    fn document(&mut self) -> Result<OsmScene> {
        self.skip_filler()?;
        if self.peek().is_none() {
            return self.err(0, "empty document");
        }
        let root = self.open_element()?;
        if root.name != "osm" {
            return self.err(root.start, format!("expected <osm> root, found <{}>", root.name));
        }
        let mut scene = OsmScene::default();
        if root.self_closing {
            return Ok(scene);
        }
        loop {
            self.skip_filler()?;
            if self.peek().is_none() {
                return self.err(root.start, "unterminated <osm>");
            }
            if self.starts_with("</") {
                self.close_element("osm")?;
                return Ok(scene);
            }
            let child = self.open_element()?;
            match child.name.as_str() {
                "node" => scene.nodes.push(self.node(child)?),
                "way" => scene.ways.push(self.way(child)?),
                _ => self.skip_element(&child)?,
            }
        }
    }

    fn node(&mut self, elem: Element) -> Result<OsmNode> {
        let id = elem.require("id")?;
        let lat_deg: f64 = elem.require("lat")?;
        let lon_deg: f64 = elem.require("lon")?;
        let mut tags = Vec::new();
        self.children(&elem, |child, scanner| {
            if child.name == "tag" {
                tags.push(scanner.tag(&child)?);
                scanner.skip_element(&child)
            } else {
                scanner.skip_element(&child)
            }
        })?;
        Ok(OsmNode { id, point: GeoPoint { lat_deg, lon_deg }, tags })
    }

    fn way(&mut self, elem: Element) -> Result<OsmWay> {
        let id = elem.require("id")?;
        let mut node_refs = Vec::new();
        let mut tags = Vec::new();
        self.children(&elem, |child, scanner| {
            match child.name.as_str() {
                "nd" => node_refs.push(child.require("ref")?),
                "tag" => tags.push(scanner.tag(&child)?),
                _ => {}
            }
            scanner.skip_element(&child)
        })?;
        Ok(OsmWay { id, node_refs, tags })
    }

    fn tag(&mut self, elem: &Element) -> Result<(String, String)> {
        let k = elem.attr("k").ok_or_else(|| Error::Parse {
            offset: elem.start,
            msg: "<tag> lacks the `k` attribute".into(),
        })?;
        let v = elem.attr("v").ok_or_else(|| Error::Parse {
            offset: elem.start,
            msg: "<tag> lacks the `v` attribute".into(),
        })?;
        Ok((k.to_string(), v.to_string()))
    }

    /// Runs `visit` for each direct child of `elem` until its close tag.
    fn children(
        &mut self,
        elem: &Element,
        mut visit: impl FnMut(Element, &mut Self) -> Result<()>,
    ) -> Result<()> {
        if elem.self_closing {
            return Ok(());
        }
        loop {
            self.skip_filler()?;
            if self.peek().is_none() {
                return self.err(elem.start, format!("unterminated <{}>", elem.name));
            }
            if self.starts_with("</") {
                return self.close_element(&elem.name);
            }
            let child = self.open_element()?;
            visit(child, self)?;
        }
    }
}

fn find(bytes: &[u8], from: usize, needle: &str) -> Option<usize> {
    let n = needle.as_bytes();
    (from..bytes.len().checked_sub(n.len())?.checked_add(1)?)
        .find(|&i| &bytes[i..i + n.len()] == n)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<osm version="0.6" generator="test">
  <!-- a corner of town -->
  <bounds minlat="48.0" minlon="16.0" maxlat="48.1" maxlon="16.1"/>
  <node id="1" lat="48.0001" lon="16.0001"/>
  <node id="2" lat="48.0002" lon="16.0001">
    <tag k="natural" v="tree"/>
  </node>
  <node id="3" lat="48.0002" lon="16.0002"/>
  <way id="10">
    <nd ref="1"/>
    <nd ref="2"/>
    <nd ref="3"/>
    <nd ref="1"/>
    <tag k="building" v="yes"/>
    <tag k="name" v="Caf&#233; &amp; Bar &quot;Arch&quot;"/>
  </way>
  <relation id="20"><member type="way" ref="10" role="outer"/></relation>
</osm>
"#;

    #[test]
    fn parses_nodes_ways_tags_and_skips_unknown_elements() {
        let scene = parse_osm(SAMPLE).unwrap();
        assert_eq!(scene.nodes.len(), 3);
        assert_eq!(scene.ways.len(), 1);
        assert_eq!(scene.nodes[1].tags, vec![("natural".to_string(), "tree".to_string())]);
        let way = &scene.ways[0];
        assert_eq!(way.id, 10);
        assert_eq!(way.node_refs, vec![1, 2, 3, 1]);
        assert_eq!(way.tags[0], ("building".to_string(), "yes".to_string()));
        assert_eq!(way.tags[1].1, "Café & Bar \"Arch\"");
        assert!((scene.nodes[0].point.lat_deg - 48.0001).abs() < 1e-12);
    }

    #[test]
    fn single_quoted_attributes_are_accepted() {
        let scene = parse_osm("<osm><node id='7' lat='1.5' lon='-2.25'/></osm>").unwrap();
        assert_eq!(scene.nodes[0].id, 7);
        assert_eq!(scene.nodes[0].point.lon_deg, -2.25);
    }

    #[test]
    fn malformed_document_reports_byte_offset() {
        let text = "<osm>\n  <node id=\"1\" lat=\"1\" lon=\"2\"\n</osm>";
        match parse_osm(text).unwrap_err() {
            Error::Parse { offset, msg } => {
                // The scanner chokes on `<` inside the unterminated node tag.
                assert!(offset > 0 && offset < text.len(), "offset {offset} out of range");
                assert!(!msg.is_empty());
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_coordinate_is_a_parse_error_at_the_element() {
        let text = "<osm><node id=\"1\" lat=\"1.0\"/></osm>";
        match parse_osm(text).unwrap_err() {
            Error::Parse { offset, msg } => {
                assert_eq!(offset, 5, "offset should point at <node>");
                assert!(msg.contains("lon"), "message was: {msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_way_reference_is_a_validation_error() {
        let text = r#"<osm><node id="1" lat="0" lon="0"/><way id="5"><nd ref="1"/><nd ref="42"/></way></osm>"#;
        match parse_osm(text).unwrap_err() {
            Error::Validation(msg) => {
                assert!(msg.contains("42"), "message was: {msg}");
                assert!(msg.contains('5'), "message was: {msg}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_entity_is_rejected() {
        let text = "<osm><node id=\"1\" lat=\"0\" lon=\"0\"><tag k=\"name\" v=\"&bogus;\"/></node></osm>";
        assert!(matches!(parse_osm(text), Err(Error::Parse { .. })));
    }
}

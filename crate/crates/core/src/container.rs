//! Tensor container: the on-disk format shared by every dense artifact
//! (feature grids, rasters, score volumes, checkpoints).
//!
//! A file is the ASCII magic line `PPLT1` followed by one block per tensor:
//!
//! ```text
//! PPLT1
//! tensor <name>
//! dtype f32
//! shape <d0> <d1> ...
//! layout row-major
//! meta <key> <value>        (zero or more lines)
//! data <payload-bytes>
//! <raw little-endian f32 samples><newline>
//! ```
//!
//! Payloads are always little-endian 32-bit floats in row-major order, so a
//! file is bit-exact across platforms. Metadata values are free-form text to
//! the end of the line; floating-point metadata is formatted with Rust's
//! shortest round-trip notation and re-parses exactly.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

const MAGIC: &str = "PPLT1";

/// One named dense tensor plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub meta: Vec<(String, String)>,
    /// Samples widened to f64 in memory; files store f32.
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!("tensor `{name}` needs positive dimensions")));
        }
        if data.len() != n {
            return Err(Error::Input(format!(
                "tensor `{name}` holds {} samples, shape implies {n}",
                data.len()
            )));
        }
        Ok(Self { name, shape, meta: Vec::new(), data })
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("tensor `{}` lacks meta key `{key}`", self.name)))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        let raw = self.meta_str(key)?;
        raw.parse::<f64>()
            .map_err(|_| Error::Format(format!("meta `{key}` = `{raw}` is not a number")))
    }

    /// Parses a comma-separated float list metadata value.
    pub fn meta_f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.meta_str(key)?
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("meta `{key}` holds a bad number `{t}`")))
            })
            .collect()
    }
}

/// Joins floats into the comma-separated form used for list metadata.
pub fn format_f64_list(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

/// An ordered set of tensors sharing one file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<TensorEntry>,
}

impl Container {
    pub fn new(entries: Vec<TensorEntry>) -> Self {
        Self { entries }
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("container lacks tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        for e in &self.entries {
            out.extend_from_slice(format!("tensor {}\n", e.name).as_bytes());
            out.extend_from_slice(b"dtype f32\n");
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            out.extend_from_slice(format!("shape {}\n", dims.join(" ")).as_bytes());
            out.extend_from_slice(b"layout row-major\n");
            for (k, v) in &e.meta {
                out.extend_from_slice(format!("meta {k} {v}\n").as_bytes());
            }
            out.extend_from_slice(format!("data {}\n", e.data.len() * 4).as_bytes());
            for &v in &e.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.push(b'\n');
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;

        fn line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
            if *pos >= bytes.len() {
                return Err(Error::Format("unexpected end of container".into()));
            }
            let start = *pos;
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            let s = std::str::from_utf8(&bytes[start..*pos])
                .map_err(|_| Error::Format("container header is not UTF-8".into()))?;
            *pos += 1; // consume '\n'
            Ok(s)
        }

        if line(bytes, &mut pos)? != MAGIC {
            return Err(Error::Format(format!("bad container magic, expected `{MAGIC}`")));
        }

        let mut entries = Vec::new();
        while pos < bytes.len() {
            let header = line(bytes, &mut pos)?;
            if header.is_empty() {
                continue; // tolerate a trailing newline
            }
            let name = header
                .strip_prefix("tensor ")
                .ok_or_else(|| Error::Format(format!("expected `tensor`, got `{header}`")))?
                .to_string();

            let dtype = line(bytes, &mut pos)?;
            if dtype != "dtype f32" {
                return Err(Error::Format(format!("tensor `{name}`: unsupported `{dtype}`")));
            }

            let shape_line = line(bytes, &mut pos)?;
            let shape: Vec<usize> = shape_line
                .strip_prefix("shape ")
                .ok_or_else(|| Error::Format(format!("tensor `{name}`: missing shape")))?
                .split_ascii_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::Format(format!("tensor `{name}`: bad dim `{t}`")))
                })
                .collect::<Result<_>>()?;

            let layout = line(bytes, &mut pos)?;
            if layout != "layout row-major" {
                return Err(Error::Format(format!("tensor `{name}`: unsupported `{layout}`")));
            }

            let mut meta = Vec::new();
            let nbytes = loop {
                let l = line(bytes, &mut pos)?;
                if let Some(rest) = l.strip_prefix("meta ") {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::Format(format!("bad meta line `{l}`")))?;
                    meta.push((k.to_string(), v.to_string()));
                } else if let Some(rest) = l.strip_prefix("data ") {
                    break rest.parse::<usize>().map_err(|_| {
                        Error::Format(format!("tensor `{name}`: bad payload size `{rest}`"))
                    })?;
                } else {
                    return Err(Error::Format(format!("unexpected header line `{l}`")));
                }
            };

            let n: usize = shape.iter().product();
            if nbytes != n * 4 {
                return Err(Error::Format(format!(
                    "tensor `{name}`: payload of {nbytes} bytes does not match shape"
                )));
            }
            if pos + nbytes > bytes.len() {
                return Err(Error::Format(format!("tensor `{name}`: truncated payload")));
            }
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let o = pos + i * 4;
                let v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
                data.push(v as f64);
            }
            pos += nbytes;
            if pos < bytes.len() && bytes[pos] == b'\n' {
                pos += 1;
            }

            let mut entry = TensorEntry::new(name, shape, data)?;
            entry.meta = meta;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }
}

//! Semantic embeddings: turn per-channel class rasters into dense feature
//! maps by summing one learned vector per channel.
//!
//! The background class of every channel is pinned to the zero vector so
//! that empty ground contributes nothing to a match score; it is never
//! treated as a learnable parameter.

use crate::error::{Error, Result};
use crate::osm::{ClassTable, GeoPoint, RasterMap, CHANNELS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Per-channel class → vector table. Row 0 of every channel is the
/// background and is fixed at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// Identifier recorded on maps produced with this table, so a match
    /// between features from different tables can be rejected.
    pub id: String,
    /// Output feature dimension.
    pub dim: usize,
    /// `class_names[channel][index]`; entry 0 is `background`.
    pub class_names: [Vec<String>; CHANNELS],
    /// `vectors[channel]` is `class_names[channel].len() × dim`, row-major.
    pub vectors: [Vec<f64>; CHANNELS],
}

impl EmbeddingTable {
    pub fn new(
        id: impl Into<String>,
        class_names: [Vec<String>; CHANNELS],
        dim: usize,
        vectors: [Vec<f64>; CHANNELS],
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        for ch in 0..CHANNELS {
            if class_names[ch].first().map(String::as_str) != Some("background") {
                return Err(Error::Config(format!(
                    "channel {ch} class list must start with `background`"
                )));
            }
            if vectors[ch].len() != class_names[ch].len() * dim {
                return Err(Error::Config(format!(
                    "channel {ch} has {} classes but {} vector entries (dim {dim})",
                    class_names[ch].len(),
                    vectors[ch].len()
                )));
            }
            if vectors[ch][..dim].iter().any(|&v| v != 0.0) {
                return Err(Error::Config(format!(
                    "channel {ch} background vector must be zero"
                )));
            }
        }
        Ok(Self { id: id.into(), dim, class_names, vectors })
    }

    /// One-hot table: every non-background class gets its own unit axis, so
    /// embedding produces multi-hot pixel vectors. Dimension is the total
    /// non-background class count across channels.
    pub fn one_hot(table: &ClassTable) -> Self {
        let dim: usize = (0..CHANNELS).map(|ch| table.class_count(ch)).sum();
        let mut vectors: [Vec<f64>; CHANNELS] = std::array::from_fn(|_| Vec::new());
        let mut offset = 0;
        for ch in 0..CHANNELS {
            let rows = table.classes[ch].len();
            let mut v = vec![0.0; rows * dim];
            for idx in 1..rows {
                v[idx * dim + offset + (idx - 1)] = 1.0;
            }
            offset += rows - 1;
            vectors[ch] = v;
        }
        Self {
            id: "one-hot".into(),
            dim,
            class_names: table.classes.clone(),
            vectors,
        }
    }

    /// Gaussian-initialized table with per-axis scale `1/√dim`.
    pub fn random(table: &ClassTable, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("finite std dev");
        let mut vectors: [Vec<f64>; CHANNELS] = std::array::from_fn(|_| Vec::new());
        for ch in 0..CHANNELS {
            let rows = table.classes[ch].len();
            let mut v = vec![0.0; rows * dim];
            for slot in v.iter_mut().skip(dim) {
                *slot = normal.sample(&mut rng);
            }
            vectors[ch] = v;
        }
        Self {
            id: format!("random-{seed}-d{dim}"),
            dim,
            class_names: table.classes.clone(),
            vectors,
        }
    }

    /// Vector of a class index within a channel.
    #[inline]
    pub fn vector(&self, channel: usize, class_index: usize) -> &[f64] {
        &self.vectors[channel][class_index * self.dim..(class_index + 1) * self.dim]
    }

    /// Vector of a class by name; fails naming the class when absent.
    pub fn vector_for(&self, channel: usize, class: &str) -> Result<&[f64]> {
        let idx = self.class_names[channel]
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| {
                Error::Lookup(format!(
                    "class `{class}` is not in channel {channel} of embedding `{}`",
                    self.id
                ))
            })?;
        Ok(self.vector(channel, idx))
    }

    /// Total learnable entries (background rows excluded).
    pub fn param_count(&self) -> usize {
        (0..CHANNELS)
            .map(|ch| (self.class_names[ch].len() - 1) * self.dim)
            .sum()
    }
}

/// Dense feature map over a metric raster grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralMap {
    pub width: usize,
    pub height: usize,
    /// Feature dimension per pixel.
    pub channels: usize,
    pub meters_per_px: f64,
    pub anchor: GeoPoint,
    pub embedding_id: String,
    /// Channel-major values: `values[(c * height + y) * width + x]`.
    pub values: Vec<f64>,
}

impl NeuralMap {
    pub fn zeros(
        width: usize,
        height: usize,
        channels: usize,
        meters_per_px: f64,
        anchor: GeoPoint,
        embedding_id: impl Into<String>,
    ) -> Self {
        Self {
            width,
            height,
            channels,
            meters_per_px,
            anchor,
            embedding_id: embedding_id.into(),
            values: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn value_at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(c, y, x)]
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
}

/// Embeds a class raster into a dense feature map: each pixel's vector is
/// the sum of its channel class vectors (background rows contribute zero).
pub fn embed_map(raster: &RasterMap, table: &EmbeddingTable) -> Result<NeuralMap> {
    for ch in 0..CHANNELS {
        let rows = table.class_names[ch].len();
        if let Some(&bad) = raster.classes
            [ch * raster.height * raster.width..(ch + 1) * raster.height * raster.width]
            .iter()
            .find(|&&c| c as usize >= rows)
        {
            return Err(Error::Lookup(format!(
                "raster channel {ch} holds class index {bad} but embedding `{}` has only {rows} classes",
                table.id
            )));
        }
    }
    let mut map = NeuralMap::zeros(
        raster.width,
        raster.height,
        table.dim,
        raster.meters_per_px,
        raster.anchor,
        table.id.clone(),
    );
    let plane = raster.height * raster.width;
    for ch in 0..CHANNELS {
        for (px, &class) in raster.classes[ch * plane..(ch + 1) * plane].iter().enumerate() {
            if class == 0 {
                continue;
            }
            let vec = table.vector(ch, class as usize);
            for (c, &v) in vec.iter().enumerate() {
                map.values[c * plane + px] += v;
            }
        }
    }
    Ok(map)
}

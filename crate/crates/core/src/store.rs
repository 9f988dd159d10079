//! Typed save/load of the engine's artifacts on top of the tensor container
//! format: feature grids, class rasters, embedded maps, score volumes and
//! training checkpoints.

use crate::bev::{BevFeature, PixelEmbedding};
use crate::container::{format_f64_list, Container, TensorEntry};
use crate::embed::{EmbeddingTable, NeuralMap};
use crate::error::{Error, Result};
use crate::learn::TrainableState;
use crate::matching::ScoreVolume;
use crate::osm::{GeoPoint, RasterMap, CHANNELS};

fn geo_meta(e: TensorEntry, meters_per_px: f64, anchor: &GeoPoint) -> TensorEntry {
    e.with_meta("meters_per_px", meters_per_px)
        .with_meta("anchor_lat", anchor.lat_deg)
        .with_meta("anchor_lon", anchor.lon_deg)
}

fn geo_from_meta(e: &TensorEntry) -> Result<(f64, GeoPoint)> {
    let mpp = e.meta_f64("meters_per_px")?;
    let anchor = GeoPoint::new(e.meta_f64("anchor_lat")?, e.meta_f64("anchor_lon")?);
    Ok((mpp, anchor))
}

fn expect_rank(e: &TensorEntry, rank: usize) -> Result<()> {
    if e.shape.len() != rank {
        return Err(Error::Format(format!(
            "tensor `{}` has rank {}, expected {rank}",
            e.name,
            e.shape.len()
        )));
    }
    Ok(())
}

// ── bird's-eye-view features ────────────────────────────────────────────────

pub fn bev_to_container(bev: &BevFeature) -> Container {
    let g = bev.grid_size;
    let values = TensorEntry::new("values", vec![bev.channels, g, g], bev.values.clone())
        .expect("feature buffer matches its grid")
        .with_meta("meters_per_cell", bev.meters_per_cell);
    let mask_data = bev.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mask = TensorEntry::new("mask", vec![g, g], mask_data).expect("mask matches its grid");
    Container::new(vec![values, mask])
}

pub fn bev_from_container(c: &Container) -> Result<BevFeature> {
    let values = c.entry("values")?;
    let mask = c.entry("mask")?;
    expect_rank(values, 3)?;
    expect_rank(mask, 2)?;
    let (channels, g) = (values.shape[0], values.shape[1]);
    if values.shape[2] != g || mask.shape != [g, g] {
        return Err(Error::Format(format!(
            "feature grid {}×{} and mask {}×{} are not matching squares",
            values.shape[1], values.shape[2], mask.shape[0], mask.shape[1]
        )));
    }
    let mut bev = BevFeature::zeros(g, channels, values.meta_f64("meters_per_cell")?);
    bev.values = values.data.clone();
    bev.mask = mask.data.iter().map(|&v| v != 0.0).collect();
    Ok(bev)
}

// ── class rasters ───────────────────────────────────────────────────────────

pub fn raster_to_container(map: &RasterMap) -> Container {
    let data = map.classes.iter().map(|&c| c as f64).collect();
    let classes = TensorEntry::new("classes", vec![CHANNELS, map.height, map.width], data)
        .expect("class buffer matches its shape");
    Container::new(vec![geo_meta(classes, map.meters_per_px, &map.anchor)])
}

pub fn raster_from_container(c: &Container) -> Result<RasterMap> {
    let e = c.entry("classes")?;
    expect_rank(e, 3)?;
    if e.shape[0] != CHANNELS {
        return Err(Error::Format(format!(
            "raster holds {} channels, expected {CHANNELS}",
            e.shape[0]
        )));
    }
    let (mpp, anchor) = geo_from_meta(e)?;
    let mut map = RasterMap::zeros(e.shape[2], e.shape[1], mpp, anchor);
    for (slot, &v) in map.classes.iter_mut().zip(&e.data) {
        if v < 0.0 || v > u16::MAX as f64 || v.fract() != 0.0 {
            return Err(Error::Format(format!("`{v}` is not a class index")));
        }
        *slot = v as u16;
    }
    Ok(map)
}

// ── embedded maps ───────────────────────────────────────────────────────────

pub fn neural_map_to_container(map: &NeuralMap) -> Container {
    let values =
        TensorEntry::new("values", vec![map.channels, map.height, map.width], map.values.clone())
            .expect("map buffer matches its shape")
            .with_meta("embedding", &map.embedding_id);
    Container::new(vec![geo_meta(values, map.meters_per_px, &map.anchor)])
}

pub fn neural_map_from_container(c: &Container) -> Result<NeuralMap> {
    let e = c.entry("values")?;
    expect_rank(e, 3)?;
    let (mpp, anchor) = geo_from_meta(e)?;
    let mut map =
        NeuralMap::zeros(e.shape[2], e.shape[1], e.shape[0], mpp, anchor, e.meta_str("embedding")?);
    map.values = e.data.clone();
    Ok(map)
}

// ── score volumes ───────────────────────────────────────────────────────────

pub fn scores_to_container(vol: &ScoreVolume) -> Container {
    let scores =
        TensorEntry::new("scores", vec![vol.height, vol.width, vol.rotations], vol.scores.clone())
            .expect("score buffer matches its shape")
            .with_meta("angle_bins", format_f64_list(&vol.angle_bins_deg))
            .with_meta("embedding", &vol.embedding_id);
    Container::new(vec![geo_meta(scores, vol.meters_per_px, &vol.anchor)])
}

pub fn scores_from_container(c: &Container) -> Result<ScoreVolume> {
    let e = c.entry("scores")?;
    expect_rank(e, 3)?;
    let bins = e.meta_f64_list("angle_bins")?;
    if bins.len() != e.shape[2] {
        return Err(Error::Format(format!(
            "volume has {} heading bins but {} bin centers",
            e.shape[2],
            bins.len()
        )));
    }
    let (mpp, anchor) = geo_from_meta(e)?;
    Ok(ScoreVolume {
        height: e.shape[0],
        width: e.shape[1],
        rotations: e.shape[2],
        angle_bins_deg: bins,
        meters_per_px: mpp,
        anchor,
        embedding_id: e.meta_str("embedding")?.to_string(),
        scores: e.data.clone(),
    })
}

// ── training checkpoints ────────────────────────────────────────────────────

/// A trainable state frozen at one point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainableState,
    pub epoch: usize,
    /// Validation loss at `epoch`.
    pub loss: f64,
    /// Learning rate in effect at `epoch`.
    pub lr: f64,
}

pub fn checkpoint_to_container(ck: &Checkpoint) -> Container {
    let table = &ck.state.table;
    let embed = &ck.state.pixel_embed;
    let mut entries = Vec::with_capacity(CHANNELS + 3);
    for ch in 0..CHANNELS {
        let rows = table.class_names[ch].len();
        let e = TensorEntry::new(format!("table{ch}"), vec![rows, table.dim], table.vectors[ch].clone())
            .expect("table rows match their class list")
            .with_meta("classes", table.class_names[ch].join(","));
        entries.push(if ch == 0 { e.with_meta("embedding", &table.id) } else { e });
    }
    entries.push(
        TensorEntry::new(
            "pixel_weight",
            vec![embed.out_channels, embed.in_channels],
            embed.weight.clone(),
        )
        .expect("weight matrix matches its shape"),
    );
    entries.push(
        TensorEntry::new("pixel_bias", vec![embed.out_channels], embed.bias.clone())
            .expect("bias matches its width"),
    );
    entries.push(
        TensorEntry::new("fusion_raw", vec![2], vec![ck.state.raw_alpha, ck.state.raw_beta])
            .expect("two fusion weights")
            .with_meta("epoch", ck.epoch)
            .with_meta("loss", ck.loss)
            .with_meta("lr", ck.lr),
    );
    Container::new(entries)
}

pub fn checkpoint_from_container(c: &Container) -> Result<Checkpoint> {
    let first = c.entry("table0")?;
    expect_rank(first, 2)?;
    let dim = first.shape[1];
    let id = first.meta_str("embedding")?.to_string();
    let mut names: [Vec<String>; CHANNELS] = Default::default();
    let mut vectors: [Vec<f64>; CHANNELS] = Default::default();
    for ch in 0..CHANNELS {
        let e = c.entry(&format!("table{ch}"))?;
        expect_rank(e, 2)?;
        if e.shape[1] != dim {
            return Err(Error::Format(format!(
                "table{ch} embeds into {} dimensions, table0 into {dim}",
                e.shape[1]
            )));
        }
        names[ch] = e.meta_str("classes")?.split(',').map(str::to_string).collect();
        if names[ch].len() != e.shape[0] {
            return Err(Error::Format(format!(
                "table{ch} lists {} classes but holds {} rows",
                names[ch].len(),
                e.shape[0]
            )));
        }
        vectors[ch] = e.data.clone();
    }
    let table = EmbeddingTable::new(id, names, dim, vectors)?;

    let weight = c.entry("pixel_weight")?;
    expect_rank(weight, 2)?;
    let bias = c.entry("pixel_bias")?;
    expect_rank(bias, 1)?;
    let pixel_embed = PixelEmbedding::new(
        weight.data.clone(),
        bias.data.clone(),
        weight.shape[1],
        weight.shape[0],
    )?;
    if pixel_embed.out_channels != dim {
        return Err(Error::Format(format!(
            "pixel embedding produces {} channels but the table embeds into {dim}",
            pixel_embed.out_channels
        )));
    }

    let fusion = c.entry("fusion_raw")?;
    if fusion.data.len() != 2 {
        return Err(Error::Format("fusion_raw must hold exactly two weights".into()));
    }
    let epoch_raw = fusion.meta_f64("epoch")?;
    if epoch_raw < 0.0 || epoch_raw.fract() != 0.0 {
        return Err(Error::Format(format!("`{epoch_raw}` is not an epoch number")));
    }
    Ok(Checkpoint {
        state: TrainableState {
            table,
            pixel_embed,
            raw_alpha: fusion.data[0],
            raw_beta: fusion.data[1],
        },
        epoch: epoch_raw as usize,
        loss: fusion.meta_f64("loss")?,
        lr: fusion.meta_f64("lr")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::OUT_OF_BOUNDS_SCORE;
    use crate::osm::ClassTable;
    use crate::synth::{synth_scene, SceneParams};

    /// The value an f64 sample takes after one trip through f32 storage.
    fn f32_trip(v: f64) -> f64 {
        v as f32 as f64
    }

    #[test]
    fn bev_roundtrip_preserves_values_mask_and_scale() {
        let mut bev = BevFeature::zeros(5, 2, 0.25);
        for (i, v) in bev.values.iter_mut().enumerate() {
            *v = (i as f64 - 20.0) * 0.125; // f32-exact
        }
        bev.mask = (0..25).map(|i| i % 3 != 0).collect();
        let back = bev_from_container(&bev_to_container(&bev)).unwrap();
        assert_eq!(back, bev);
    }

    #[test]
    fn raster_roundtrip_is_exact() {
        let scene = synth_scene(&SceneParams { extent_m: 16.0, seed: 4, ..SceneParams::default() })
            .unwrap();
        let back = raster_from_container(&raster_to_container(&scene.raster)).unwrap();
        assert_eq!(back, scene.raster);
    }

    #[test]
    fn neural_map_roundtrip_keeps_georeferencing() {
        let mut map = NeuralMap::zeros(6, 4, 3, 0.5, GeoPoint::new(48.2, 16.37), "one-hot");
        for (i, v) in map.values.iter_mut().enumerate() {
            *v = i as f64 * 0.5 - 3.0;
        }
        let back = neural_map_from_container(&neural_map_to_container(&map)).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn score_volume_roundtrip_keeps_bins_and_sentinels() {
        let mut vol = ScoreVolume {
            height: 3,
            width: 4,
            rotations: 4,
            angle_bins_deg: vec![-135.0, -45.0, 45.0, 135.0],
            meters_per_px: 0.5,
            anchor: GeoPoint::new(48.2, 16.37),
            embedding_id: "one-hot".into(),
            scores: vec![0.0; 48],
        };
        for (i, s) in vol.scores.iter_mut().enumerate() {
            *s = if i % 7 == 0 { OUT_OF_BOUNDS_SCORE } else { i as f64 * 0.25 };
        }
        let back = scores_from_container(&scores_to_container(&vol)).unwrap();
        assert_eq!(back, vol);
        // The sentinel must survive storage bit-exactly or downstream
        // in-bounds checks would silently break.
        assert_eq!(back.scores[0], OUT_OF_BOUNDS_SCORE);
    }

    #[test]
    fn checkpoint_roundtrip_restores_the_state_at_storage_precision() {
        let state = TrainableState::init(&ClassTable::default_table(), 4, 3, 11).unwrap();
        let ck = Checkpoint { state, epoch: 12, loss: 2.375, lr: 0.0125 };
        let bytes = checkpoint_to_container(&ck).to_bytes();
        let back = checkpoint_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();

        assert_eq!(back.epoch, 12);
        assert_eq!(back.loss, 2.375);
        assert_eq!(back.lr, 0.0125);
        assert_eq!(back.state.table.id, ck.state.table.id);
        assert_eq!(back.state.table.class_names, ck.state.table.class_names);
        for ch in 0..CHANNELS {
            for (a, b) in back.state.table.vectors[ch].iter().zip(&ck.state.table.vectors[ch]) {
                assert_eq!(*a, f32_trip(*b));
            }
        }
        for (a, b) in back.state.pixel_embed.weight.iter().zip(&ck.state.pixel_embed.weight) {
            assert_eq!(*a, f32_trip(*b));
        }
        assert_eq!(back.state.raw_alpha, f32_trip(ck.state.raw_alpha));
        assert_eq!(back.state.fusion_params().alpha, 0.5);
    }

    #[test]
    fn tampered_background_rows_are_rejected_on_load() {
        let state = TrainableState::init(&ClassTable::default_table(), 2, 3, 0).unwrap();
        let ck = Checkpoint { state, epoch: 0, loss: 1.0, lr: 0.1 };
        let mut container = checkpoint_to_container(&ck);
        container.entries[0].data[0] = 0.5; // background row must stay zero
        let err = checkpoint_from_container(&container).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn mismatched_shapes_are_format_errors() {
        let bev = BevFeature::zeros(3, 1, 0.5);
        let mut c = bev_to_container(&bev);
        c.entries[1].shape = vec![9];
        assert!(matches!(bev_from_container(&c), Err(Error::Format(_))));
    }
}

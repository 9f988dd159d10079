//! Metric localization of panoramic cameras against rasterized vector maps.
//!
//! The pipeline estimates a 3-DoF pose (map cell `u`, `v` and heading
//! `theta`) for a ground-level equirectangular panorama:
//!
//! ```text
//! panorama ──► pinhole views ──► BEV features ──┐
//!                                               ├─► score volumes ─► fused
//! vector map ─► raster ─► embedded map ─────────┘      (rotated       log-
//!                                                       matching)     probs
//! ```
//!
//! * [`pano`] splits the panorama into undistorted pinhole views.
//! * [`bev`] projects views onto camera-centered ground grids and merges them.
//! * [`osm`] parses and rasterizes vector map data; [`embed`] lifts the
//!   raster into feature space.
//! * [`matching`] correlates a BEV template against the map over a ring of
//!   rotations, exhaustively or through FFT cross-correlation.
//! * [`fusion`] normalizes score volumes in log space and fuses the panoramic
//!   and single-view distributions into one pose estimate.
//! * [`learn`] fits the embeddings and fusion weights by gradient descent.
//! * [`synth`], [`pipeline`] and [`eval`] provide the synthetic-scene
//!   harness, the end-to-end localizer and recall metrics.

pub mod bev;
pub mod container;
pub mod embed;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod img;
pub mod learn;
pub mod matching;
pub mod osm;
pub mod pano;
pub mod pipeline;
pub mod store;
pub mod synth;
pub mod util;

pub use error::{Error, Result};

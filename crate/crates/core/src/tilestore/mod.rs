//! Tiles: multichannel rasters with ground-truth masks and footprints.
//!
//! A [`Tile`] is the atomic dataset unit. This module also owns the synthetic
//! scene generator, the six-way dihedral augmentation, the on-disk tile
//! container and seeded dataset splits.

mod augment;
mod io;
mod scene;
mod split;

pub use augment::{augment, Dihedral};
pub use io::{load_tile, save_tile, TileManifest, TILE_SCHEMA_VERSION};
pub use scene::{derive_seed, generate_dataset, generate_scene, SceneSpec, DEFAULT_CHANNELS};
pub use split::{split_dataset, DatasetSplit};

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::geometry::{rasterize, Ring};

#[derive(Debug, Error)]
pub enum TileError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("could only place {placed} of {requested} buildings after exhausting retries")]
    Capacity { placed: usize, requested: usize },
    #[error("tile is {height}x{width}; augmentation requires a square tile")]
    NotSquare { height: usize, width: usize },
    #[error("invalid tile: {0}")]
    Invalid(String),
    #[error("corrupt tile manifest {path}: {reason}")]
    CorruptHeader { path: String, reason: String },
    #[error("{file}: expected {expected} bytes of payload, found {found}")]
    PayloadLength { file: String, expected: usize, found: usize },
    #[error("manifest declares {declared} channels but payload holds {found}")]
    ShapeMismatch { declared: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A multichannel raster with its building mask and footprints.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub id: String,
    /// `C x H x W`, values in `[0, 1]`.
    pub channels: Array3<f32>,
    /// `H x W`, values in `{0, 1}`.
    pub mask: Array2<u8>,
    pub polygons: Vec<Ring>,
    pub channel_names: Vec<String>,
}

impl Tile {
    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.dim().0
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v != 0).count()
    }

    /// Ground truth as a float map.
    pub fn target(&self) -> Array2<f32> {
        self.mask.mapv(f32::from)
    }

    /// Stacks the listed channels, in the given order.
    pub fn select_channels(&self, indices: &[usize]) -> Result<Array3<f32>, TileError> {
        let c = self.n_channels();
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(TileError::Invalid(format!("channel {bad} out of range (C={c})")));
        }
        Ok(self.channels.select(ndarray::Axis(0), indices))
    }

    /// Checks every structural invariant of a tile.
    pub fn validate(&self) -> Result<(), TileError> {
        let (c, h, w) = self.channels.dim();
        if self.mask.dim() != (h, w) {
            return Err(TileError::Invalid(format!(
                "mask shape {:?} differs from channel shape ({h}, {w})",
                self.mask.dim()
            )));
        }
        if self.channel_names.len() != c {
            return Err(TileError::Invalid(format!(
                "{} channel names for {c} channels",
                self.channel_names.len()
            )));
        }
        if self.channels.iter().any(|v| !v.is_finite()) {
            return Err(TileError::NonFinite("channels".into()));
        }
        if self.channels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(TileError::Invalid("channel value outside [0, 1]".into()));
        }
        if self.mask.iter().any(|&v| v > 1) {
            return Err(TileError::Invalid("mask value outside {0, 1}".into()));
        }
        for (i, ring) in self.polygons.iter().enumerate() {
            if !ring.is_finite() {
                return Err(TileError::NonFinite(format!("polygon {i}")));
            }
            if !ring.is_closed() {
                return Err(TileError::Invalid(format!("polygon {i} is not closed")));
            }
            if !ring.within(w, h) {
                return Err(TileError::Invalid(format!("polygon {i} leaves the tile")));
            }
        }
        if rasterize(&self.polygons, h, w) != self.mask {
            return Err(TileError::Invalid("polygons do not rasterize to the mask".into()));
        }
        Ok(())
    }
}

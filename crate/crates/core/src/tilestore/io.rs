//! Tile container: one directory per tile.
//!
//! ```text
//! <dir>/manifest.json   schema_version, id, H, W, C, channel names, dtype, byte order, layout
//! <dir>/channels.bin    C*H*W float32, little-endian, channel-major, row-major within a channel
//! <dir>/mask.bin        H*W uint8
//! <dir>/polygons.json   [[[x, y], ...], ...], each ring closed
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{Tile, TileError};
use crate::geometry::Ring;

pub const TILE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileManifest {
    pub schema_version: u32,
    pub id: String,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub channel_names: Vec<String>,
    pub dtype: String,
    pub byte_order: String,
    pub layout: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TileError + '_ {
    move |source| TileError::Io { path: path.display().to_string(), source }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TileError> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text).map_err(io_err(path))
}

pub fn save_tile(tile: &Tile, dir: &Path) -> Result<(), TileError> {
    tile.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (c, h, w) = tile.channels.dim();
    let manifest = TileManifest {
        schema_version: TILE_SCHEMA_VERSION,
        id: tile.id.clone(),
        height: h,
        width: w,
        channels: c,
        channel_names: tile.channel_names.clone(),
        dtype: "float32".into(),
        byte_order: "little-endian".into(),
        layout: "channel-major".into(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;

    let mut payload = Vec::with_capacity(c * h * w * 4);
    for v in tile.channels.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join("channels.bin");
    fs::write(&path, payload).map_err(io_err(&path))?;

    let path = dir.join("mask.bin");
    fs::write(&path, tile.mask.iter().copied().collect::<Vec<u8>>()).map_err(io_err(&path))?;

    write_json(&dir.join("polygons.json"), &tile.polygons)
}

fn read_manifest(path: &Path) -> Result<TileManifest, TileError> {
    let corrupt = |reason: String| TileError::CorruptHeader { path: path.display().to_string(), reason };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m: TileManifest = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if m.schema_version != TILE_SCHEMA_VERSION {
        return Err(corrupt(format!("unsupported schema_version {}", m.schema_version)));
    }
    if m.dtype != "float32" || m.byte_order != "little-endian" || m.layout != "channel-major" {
        return Err(corrupt(format!(
            "unsupported encoding {}/{}/{}",
            m.dtype, m.byte_order, m.layout
        )));
    }
    if m.channel_names.len() != m.channels {
        return Err(corrupt(format!(
            "{} channel names for C={}",
            m.channel_names.len(),
            m.channels
        )));
    }
    if m.height == 0 || m.width == 0 {
        return Err(corrupt("empty raster".into()));
    }
    Ok(m)
}

pub fn load_tile(dir: &Path) -> Result<Tile, TileError> {
    let m = read_manifest(&dir.join("manifest.json"))?;
    let (c, h, w) = (m.channels, m.height, m.width);
    let plane = h * w * 4;

    let path = dir.join("channels.bin");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() != c * plane {
        if bytes.len() % plane == 0 {
            return Err(TileError::ShapeMismatch { declared: c, found: bytes.len() / plane });
        }
        return Err(TileError::PayloadLength {
            file: "channels.bin".into(),
            expected: c * plane,
            found: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TileError::NonFinite("channels.bin".into()));
    }
    let channels = Array3::from_shape_vec((c, h, w), values).expect("length checked");

    let path = dir.join("mask.bin");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() != h * w {
        return Err(TileError::PayloadLength { file: "mask.bin".into(), expected: h * w, found: bytes.len() });
    }
    let mask = Array2::from_shape_vec((h, w), bytes).expect("length checked");

    let path = dir.join("polygons.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let polygons: Vec<Ring> = serde_json::from_str(&text).map_err(|e| TileError::CorruptHeader {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;

    let tile = Tile { id: m.id, channels, mask, polygons, channel_names: m.channel_names };
    tile.validate()?;
    Ok(tile)
}

//! Match-status overlays written as binary PPM (P6) images.
//!
//! Each polygon is drawn as the inner boundary of its rasterization,
//! thickened inward to the line width. Matched pairs are drawn first in white,
//! then missed ground truth in blue and false positives in yellow.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rasterize, Ring};
use crate::polygonize::PolygonSet;
use crate::scorer::MatchReport;
use crate::tilestore::Tile;

#[derive(Debug, Error)]
pub enum OverlayError {
    #[error("channel {index} out of range for a {available}-channel tile")]
    Channel { index: usize, available: usize },
    #[error("line width must be at least 1")]
    LineWidth,
    #[error("report refers to {what} {index}, but only {len} exist")]
    ReportMismatch { what: &'static str, index: usize, len: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayColors {
    pub matched: [u8; 3],
    pub false_positive: [u8; 3],
    pub false_negative: [u8; 3],
}

impl Default for OverlayColors {
    fn default() -> Self {
        OverlayColors { matched: [255, 255, 255], false_positive: [255, 255, 0], false_negative: [0, 0, 255] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlaySpec {
    /// Tile channels shown as red, green and blue.
    pub channels: [usize; 3],
    pub colors: OverlayColors,
    pub line_width: usize,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        OverlaySpec { channels: [0, 1, 2], colors: OverlayColors::default(), line_width: 1 }
    }
}

/// Stroke class per pixel in a rendered overlay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Stroke {
    None = 0,
    Matched = 1,
    FalseNegative = 2,
    FalsePositive = 3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub data: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), OverlayError> {
        fs::write(path, self.to_ppm()).map_err(|source| OverlayError::Io { path: path.display().to_string(), source })
    }
}

/// Three tile channels, each min-max stretched to `0..=255`.
pub fn base_image(tile: &Tile, channels: [usize; 3]) -> Result<Image, OverlayError> {
    let available = tile.n_channels();
    if let Some(&index) = channels.iter().find(|&&c| c >= available) {
        return Err(OverlayError::Channel { index, available });
    }
    let (h, w) = (tile.height(), tile.width());
    let mut img = Image { width: w, height: h, data: vec![0; 3 * h * w] };
    for (k, &c) in channels.iter().enumerate() {
        let plane = tile.channels.index_axis(ndarray::Axis(0), c);
        let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        for ((r, col), &v) in plane.indexed_iter() {
            let s = if span > 0.0 { (v - lo) / span } else { 0.0 };
            img.data[3 * (r * w + col) + k] = (s * 255.0).round() as u8;
        }
    }
    Ok(img)
}

/// Pixels of the ring's rasterization within `line_width - 1` (chessboard
/// distance) of a pixel that has a 4-neighbour outside it.
pub fn outline(ring: &Ring, height: usize, width: usize, line_width: usize) -> Array2<bool> {
    let fill = rasterize(std::slice::from_ref(ring), height, width);
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width && fill[[r as usize, c as usize]] != 0
    };
    let edge = Array2::from_shape_fn((height, width), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        inside(r, c) && !(inside(r - 1, c) && inside(r + 1, c) && inside(r, c - 1) && inside(r, c + 1))
    });
    let reach = line_width.saturating_sub(1) as isize;
    Array2::from_shape_fn((height, width), |(r, c)| {
        if fill[[r, c]] == 0 {
            return false;
        }
        let (r, c) = (r as isize, c as isize);
        (-reach..=reach).any(|dr| {
            (-reach..=reach).any(|dc| {
                let (y, x) = (r + dr, c + dc);
                y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && edge[[y as usize, x as usize]]
            })
        })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub image: Image,
    pub strokes: Array2<u8>,
}

impl Overlay {
    pub fn count(&self, stroke: Stroke) -> usize {
        self.strokes.iter().filter(|&&s| s == stroke as u8).count()
    }
}

/// Draws `preds` and the tile's ground truth over the base image, coloured
/// by their status in `report`.
pub fn render_overlay(
    tile: &Tile,
    preds: &PolygonSet,
    report: &MatchReport,
    spec: &OverlaySpec,
) -> Result<Overlay, OverlayError> {
    if spec.line_width == 0 {
        return Err(OverlayError::LineWidth);
    }
    let check = |what, index: usize, len: usize| {
        if index < len {
            Ok(())
        } else {
            Err(OverlayError::ReportMismatch { what, index, len })
        }
    };
    let (np, ng) = (preds.len(), tile.polygons.len());
    for p in &report.pairs {
        check("prediction", p.pred, np)?;
        check("ground truth", p.gt, ng)?;
    }
    for &i in &report.fp_indices {
        check("prediction", i, np)?;
    }
    for &i in &report.fn_indices {
        check("ground truth", i, ng)?;
    }

    let mut image = base_image(tile, spec.channels)?;
    let (h, w) = (tile.height(), tile.width());
    let mut strokes = Array2::<u8>::zeros((h, w));
    let mut draw = |ring: &Ring, stroke: Stroke, rgb: [u8; 3]| {
        for ((r, c), &on) in outline(ring, h, w, spec.line_width).indexed_iter() {
            if on {
                strokes[[r, c]] = stroke as u8;
                image.set(r, c, rgb);
            }
        }
    };
    let colors = &spec.colors;
    for p in &report.pairs {
        draw(&tile.polygons[p.gt], Stroke::Matched, colors.matched);
        draw(&preds.polygons[p.pred].ring, Stroke::Matched, colors.matched);
    }
    for &i in &report.fn_indices {
        draw(&tile.polygons[i], Stroke::FalseNegative, colors.false_negative);
    }
    for &i in &report.fp_indices {
        draw(&preds.polygons[i].ring, Stroke::FalsePositive, colors.false_positive);
    }
    Ok(Overlay { image, strokes })
}

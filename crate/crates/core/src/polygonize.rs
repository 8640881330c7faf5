//! Probability map to building footprints.
//!
//! Threshold, label 8-connected components, then trace each component's
//! outer boundary along pixel corners. Rings are rectilinear and clockwise in
//! image coordinates, starting at the top-left corner of the component's
//! first pixel in raster order. Two pixels that touch only at a corner belong
//! to one component, so a ring may pass through such a pinch vertex twice.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Ring;
use crate::jaccard::SegMap;

#[derive(Debug, Error)]
pub enum PolygonizeError {
    #[error("no component with id {0}")]
    UnknownComponent(u32),
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
}

/// `1` where `value >= threshold`.
pub fn binarize(map: &SegMap, threshold: f32) -> Array2<u8> {
    map.values().mapv(|v| (v >= threshold) as u8)
}

/// Dense component labels: `0` is background, components are `1..=count`
/// numbered in raster order of their first pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub labels: Array2<u32>,
    pub count: usize,
}

impl Components {
    pub fn pixels(&self, id: u32) -> Vec<(usize, usize)> {
        self.labels.indexed_iter().filter(|(_, &l)| l == id).map(|(p, _)| p).collect()
    }
}

/// 8-connected component labelling.
pub fn connected_components(mask: &Array2<u8>) -> Components {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 || labels[[r, c]] != 0 {
                continue;
            }
            count += 1;
            labels[[r, c]] = count;
            queue.push_back((r, c));
            while let Some((y, x)) = queue.pop_front() {
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = count;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
        }
    }
    Components { labels, count: count as usize }
}

/// Outer boundary of component `id` as a closed pixel-corner ring.
///
/// The boundary is walked with the component on the right. At each corner
/// the walk turns left if the pixel ahead-left is in the component, goes
/// straight if the pixel ahead-right is, and turns right otherwise. Preferring
/// the left turn carries the walk through diagonal pinches, which matches
/// 8-connectivity. Holes are not traced, so the ring's fill covers them.
pub fn trace_contour(labels: &Array2<u32>, id: u32) -> Result<Ring, PolygonizeError> {
    let (h, w) = labels.dim();
    let start = labels
        .indexed_iter()
        .find(|(_, &l)| l == id && id != 0)
        .map(|(p, _)| p)
        .ok_or(PolygonizeError::UnknownComponent(id))?;
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && labels[[r as usize, c as usize]] == id;

    // Directions: 0 east, 1 south, 2 west, 3 north (image coordinates).
    const STEP: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    // Pixel offsets (row, col) ahead-left and ahead-right of a corner (x, y)
    // for each heading; pixel (r, c) has its top-left corner at (c, r).
    const AHEAD: [[(i64, i64); 2]; 4] = [
        [(-1, 0), (0, 0)],   // east: NE, SE
        [(0, 0), (0, -1)],   // south: SE, SW
        [(0, -1), (-1, -1)], // west: SW, NW
        [(-1, -1), (-1, 0)], // north: NW, NE
    ];

    let origin = (start.1 as i64, start.0 as i64);
    let (mut x, mut y) = origin;
    let mut dir = 0usize;
    let mut vertices = vec![[x as f64, y as f64]];
    loop {
        x += STEP[dir].0;
        y += STEP[dir].1;
        if (x, y) == origin {
            break;
        }
        let [left, right] = AHEAD[dir];
        let next = if inside(y + left.0, x + left.1) {
            (dir + 3) % 4
        } else if inside(y + right.0, x + right.1) {
            dir
        } else {
            (dir + 1) % 4
        };
        if next != dir {
            vertices.push([x as f64, y as f64]);
            dir = next;
        }
    }
    Ok(Ring::closed(vertices))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub ring: Ring,
    /// Pixel count of the component (hole pixels are not counted).
    pub area: f64,
    pub component_id: u32,
    /// Mean probability over the component's pixels.
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolygonSet {
    pub polygons: Vec<Polygon>,
}

impl PolygonSet {
    /// Ground-truth footprints as a set with unit scores.
    pub fn from_rings(rings: &[Ring]) -> Self {
        let polygons = rings
            .iter()
            .enumerate()
            .map(|(i, r)| Polygon { ring: r.clone(), area: r.area(), component_id: i as u32 + 1, score: 1.0 })
            .collect();
        PolygonSet { polygons }
    }

    pub fn rings(&self) -> Vec<Ring> {
        self.polygons.iter().map(|p| p.ring.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.polygons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), PolygonizeError> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, text).map_err(|e| PolygonizeError::Io { path: path.display().to_string(), reason: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, PolygonizeError> {
        let err = |reason: String| PolygonizeError::Io { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

/// Binarize, label, trace, and drop components smaller than `min_area` pixels.
pub fn extract_polygons(map: &SegMap, threshold: f32, min_area: f64) -> PolygonSet {
    let comps = connected_components(&binarize(map, threshold));
    let mut area = vec![0usize; comps.count + 1];
    let mut mass = vec![0f64; comps.count + 1];
    for (&l, &p) in comps.labels.iter().zip(map.values()) {
        area[l as usize] += 1;
        mass[l as usize] += p as f64;
    }
    let polygons = (1..=comps.count as u32)
        .filter(|&id| area[id as usize] as f64 >= min_area)
        .map(|id| Polygon {
            ring: trace_contour(&comps.labels, id).expect("label exists"),
            area: area[id as usize] as f64,
            component_id: id,
            score: (mass[id as usize] / area[id as usize] as f64).clamp(0.0, 1.0),
        })
        .collect();
    PolygonSet { polygons }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize;
    use ndarray::array;

    fn map(v: Array2<f32>) -> SegMap {
        SegMap::new(v).unwrap()
    }

    #[test]
    fn binarize_conventions() {
        let half = map(Array2::from_elem((3, 3), 0.5));
        assert!(binarize(&half, 0.5).iter().all(|&v| v == 1));
        let below = map(array![[0.99, 0.2], [0.0, 0.999]]);
        assert!(binarize(&below, 1.0).iter().all(|&v| v == 0));
        let bin = map(array![[1.0, 0.0], [0.0, 1.0]]);
        let once = binarize(&bin, 0.5);
        assert_eq!(binarize(&SegMap::from_mask(&once), 0.5), once);
    }

    #[test]
    fn diagonal_pixels_join() {
        let c = connected_components(&array![[1, 0], [0, 1]]);
        assert_eq!(c.count, 1);
        let c = connected_components(&array![[1, 0, 1], [0, 0, 0], [1, 0, 0]]);
        assert_eq!(c.count, 3);
        assert_eq!(c.labels, array![[1, 0, 2], [0, 0, 0], [3, 0, 0]]);
    }

    #[test]
    fn single_pixel_ring() {
        let mut m = Array2::<u8>::zeros((4, 5));
        m[[2, 3]] = 1;
        let c = connected_components(&m);
        let ring = trace_contour(&c.labels, 1).unwrap();
        assert_eq!(ring, Ring::rect(3.0, 2.0, 1.0, 1.0));
        assert_eq!(ring.area(), 1.0);
        assert!(matches!(trace_contour(&c.labels, 2), Err(PolygonizeError::UnknownComponent(2))));
    }

    #[test]
    fn rectangle_has_four_corners() {
        let mut m = Array2::<u8>::zeros((8, 8));
        m.slice_mut(ndarray::s![2..5, 1..5]).fill(1);
        let ring = trace_contour(&connected_components(&m).labels, 1).unwrap();
        assert_eq!(ring.points().len(), 5);
        assert_eq!(ring.area(), 12.0);
        assert_eq!(ring, Ring::rect(1.0, 2.0, 4.0, 3.0));
    }

    #[test]
    fn pinch_is_traced_through() {
        let m = array![[1u8, 0, 0], [0, 1, 1], [0, 1, 0]];
        let ring = trace_contour(&connected_components(&m).labels, 1).unwrap();
        assert_eq!(ring.area(), 4.0);
        assert_eq!(rasterize(&[ring], 3, 3), m);
    }

    #[test]
    fn holes_are_not_traced() {
        let mut m = Array2::<u8>::ones((5, 5));
        m[[2, 2]] = 0;
        let set = extract_polygons(&SegMap::from_mask(&m), 0.5, 0.0);
        assert_eq!(set.len(), 1);
        assert_eq!(set.polygons[0].ring, Ring::rect(0.0, 0.0, 5.0, 5.0));
        assert_eq!(set.polygons[0].area, 24.0);
    }

    #[test]
    fn min_area_and_scores() {
        let mut v = Array2::<f32>::zeros((8, 8));
        v.slice_mut(ndarray::s![0..2, 0..2]).fill(0.75);
        v.slice_mut(ndarray::s![4..7, 4..7]).fill(1.0);
        let all = extract_polygons(&map(v.clone()), 0.5, 0.0);
        assert_eq!(all.len(), 2);
        assert_eq!(all.polygons[0].score, 0.75);
        assert_eq!(all.polygons[0].area, 4.0);
        let big = extract_polygons(&map(v), 0.5, 5.0);
        assert_eq!(big.len(), 1);
        assert_eq!(big.polygons[0].area, 9.0);
    }

    #[test]
    fn polygon_set_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Array2::<f32>::zeros((6, 6));
        v.slice_mut(ndarray::s![1..3, 2..5]).fill(0.9);
        let set = extract_polygons(&map(v), 0.5, 0.0);
        let path = dir.path().join("polygons.json");
        set.save(&path).unwrap();
        assert_eq!(PolygonSet::load(&path).unwrap(), set);
    }
}

//! Pixel-coordinate rings and their rasterization.
//!
//! Coordinates follow the image convention: `x` grows to the right along a
//! row, `y` grows downward, and pixel `(row, col)` covers the unit square
//! `[col, col + 1] x [row, row + 1]`. A pixel belongs to a ring when its
//! center `(col + 0.5, row + 0.5)` is inside under the even-odd rule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A closed polygon ring in pixel coordinates (first vertex == last vertex).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ring(pub Vec<[f64; 2]>);

impl Ring {
    /// Builds a ring from open vertices, appending the closing vertex.
    pub fn closed(mut points: Vec<[f64; 2]>) -> Self {
        if let (Some(first), Some(last)) = (points.first().copied(), points.last().copied()) {
            if first != last {
                points.push(first);
            }
        }
        Ring(points)
    }

    /// Axis-aligned rectangle with top-left corner `(x, y)`.
    pub fn rect(x: f64, y: f64, w: f64, h: f64) -> Self {
        Ring(vec![[x, y], [x + w, y], [x + w, y + h], [x, y + h], [x, y]])
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.0
    }

    pub fn is_closed(&self) -> bool {
        self.0.len() >= 4 && self.0.first() == self.0.last()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|p| p[0].is_finite() && p[1].is_finite())
    }

    /// Signed shoelace area; positive for clockwise rings in image coordinates.
    pub fn signed_area(&self) -> f64 {
        let pts = &self.0;
        if pts.len() < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for pair in pts.windows(2) {
            acc += pair[0][0] * pair[1][1] - pair[1][0] * pair[0][1];
        }
        0.5 * acc
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.0.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), p| (x0.min(p[0]), y0.min(p[1]), x1.max(p[0]), y1.max(p[1])),
        )
    }

    /// True when every vertex lies in `[0, width] x [0, height]`.
    pub fn within(&self, width: usize, height: usize) -> bool {
        let (x0, y0, x1, y1) = self.bounds();
        x0 >= 0.0 && y0 >= 0.0 && x1 <= width as f64 && y1 <= height as f64
    }

    /// Applies `f` to every vertex and re-normalizes orientation and start.
    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Ring {
        Ring(self.0.iter().map(|&p| f(p)).collect()).canonical()
    }

    /// Clockwise orientation (image coordinates), starting at the vertex with
    /// the smallest `(y, x)`.
    pub fn canonical(&self) -> Ring {
        if !self.is_closed() {
            return self.clone();
        }
        let mut open: Vec<[f64; 2]> = self.0[..self.0.len() - 1].to_vec();
        if self.signed_area() < 0.0 {
            open.reverse();
        }
        let start = open
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a[1].total_cmp(&b[1]).then(a[0].total_cmp(&b[0])))
            .map(|(i, _)| i)
            .unwrap_or(0);
        open.rotate_left(start);
        Ring::closed(open)
    }

    /// Sorted x positions where the horizontal line `y = py` crosses the ring,
    /// using the half-open rule on edge end points.
    fn crossings(&self, py: f64, out: &mut Vec<f64>) {
        out.clear();
        for e in self.0.windows(2) {
            let ([x1, y1], [x2, y2]) = (e[0], e[1]);
            if (y1 > py) != (y2 > py) {
                out.push(x1 + (py - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        out.sort_by(f64::total_cmp);
    }

    /// Calls `f(row, col)` for every pixel whose center falls inside the ring,
    /// clipped to a `height x width` grid.
    pub fn for_each_pixel(&self, height: usize, width: usize, mut f: impl FnMut(usize, usize)) {
        if !self.is_closed() {
            return;
        }
        let (_, y0, _, y1) = self.bounds();
        let row_lo = (y0 - 0.5).ceil().max(0.0) as usize;
        let row_hi = ((y1 - 0.5).floor() as isize).min(height as isize - 1);
        let mut xs = Vec::new();
        for row in row_lo as isize..=row_hi {
            let row = row as usize;
            self.crossings(row as f64 + 0.5, &mut xs);
            for span in xs.chunks_exact(2) {
                // centers c + 0.5 in [span[0], span[1])
                let c_lo = (span[0] - 0.5).ceil().max(0.0);
                let c_hi = ((span[1] - 0.5).ceil() as isize).min(width as isize);
                let mut c = c_lo as isize;
                while c < c_hi {
                    f(row, c as usize);
                    c += 1;
                }
            }
        }
    }

    /// Number of pixel centers covered inside a `height x width` grid.
    pub fn pixel_count(&self, height: usize, width: usize) -> usize {
        let mut n = 0;
        self.for_each_pixel(height, width, |_, _| n += 1);
        n
    }

    /// Distance from the nearest pixel center in the grid to any ring edge.
    pub(crate) fn min_center_clearance(&self, height: usize, width: usize) -> f64 {
        let (x0, y0, x1, y1) = self.bounds();
        let r0 = (y0.floor() as isize - 1).max(0) as usize;
        let r1 = ((y1.ceil() as isize + 1).max(0) as usize).min(height);
        let c0 = (x0.floor() as isize - 1).max(0) as usize;
        let c1 = ((x1.ceil() as isize + 1).max(0) as usize).min(width);
        let mut best = f64::INFINITY;
        for r in r0..r1 {
            for c in c0..c1 {
                let p = [c as f64 + 0.5, r as f64 + 0.5];
                for e in self.0.windows(2) {
                    best = best.min(segment_distance(p, e[0], e[1]));
                }
            }
        }
        best
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

/// Rasterizes the union of `rings` into a `height x width` binary mask.
pub fn rasterize(rings: &[Ring], height: usize, width: usize) -> Array2<u8> {
    let mut mask = Array2::zeros((height, width));
    for ring in rings {
        ring.for_each_pixel(height, width, |r, c| mask[[r, c]] = 1);
    }
    mask
}

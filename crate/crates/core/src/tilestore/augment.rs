use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::{Tile, TileError};

/// The six square-symmetry transforms used for training-set enlargement.
///
/// Rotations are counter-clockwise as displayed (rows top to bottom).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
}

impl Dihedral {
    pub const ALL: [Dihedral; 6] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipHorizontal,
        Dihedral::FlipVertical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dihedral::Identity => "id",
            Dihedral::Rot90 => "rot90",
            Dihedral::Rot180 => "rot180",
            Dihedral::Rot270 => "rot270",
            Dihedral::FlipHorizontal => "fliph",
            Dihedral::FlipVertical => "flipv",
        }
    }

    /// Transforms a single plane. Rotations assume a square plane.
    pub fn apply2<T: Clone>(self, a: ArrayView2<'_, T>) -> Array2<T> {
        match self {
            Dihedral::Identity => a.to_owned(),
            // new[i][j] = old[j][n-1-i]
            Dihedral::Rot90 => a.t().slice(s![..;-1, ..]).to_owned(),
            Dihedral::Rot180 => a.slice(s![..;-1, ..;-1]).to_owned(),
            // new[i][j] = old[n-1-j][i]
            Dihedral::Rot270 => a.t().slice(s![.., ..;-1]).to_owned(),
            Dihedral::FlipHorizontal => a.slice(s![.., ..;-1]).to_owned(),
            Dihedral::FlipVertical => a.slice(s![..;-1, ..]).to_owned(),
        }
    }

    /// Transforms every plane of a `C x H x W` stack.
    pub fn apply3<T: Clone + num_traits::Zero>(self, a: ArrayView3<'_, T>) -> Array3<T> {
        let (c, h, w) = a.dim();
        let (oh, ow) = match self {
            Dihedral::Rot90 | Dihedral::Rot270 => (w, h),
            _ => (h, w),
        };
        let mut out = Array3::zeros((c, oh, ow));
        for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
            dst.assign(&self.apply2(src));
        }
        out
    }

    /// Maps a continuous point of an `n x n` tile.
    pub fn apply_point(self, p: [f64; 2], n: f64) -> [f64; 2] {
        let [x, y] = p;
        match self {
            Dihedral::Identity => [x, y],
            Dihedral::Rot90 => [y, n - x],
            Dihedral::Rot180 => [n - x, n - y],
            Dihedral::Rot270 => [n - y, x],
            Dihedral::FlipHorizontal => [n - x, y],
            Dihedral::FlipVertical => [x, n - y],
        }
    }

    /// Applies the transform to channels, mask and polygons of a square tile.
    pub fn apply_tile(self, tile: &Tile) -> Result<Tile, TileError> {
        let (h, w) = (tile.height(), tile.width());
        if h != w {
            return Err(TileError::NotSquare { height: h, width: w });
        }
        let n = w as f64;
        Ok(Tile {
            id: format!("{}@{}", tile.id, self.name()),
            channels: self.apply3(tile.channels.view()),
            mask: self.apply2(tile.mask.view()),
            polygons: tile
                .polygons
                .iter()
                .map(|r| r.map(|p| self.apply_point(p, n)))
                .collect(),
            channel_names: tile.channel_names.clone(),
        })
    }
}

/// Returns `[identity, rot90, rot180, rot270, flip-horizontal, flip-vertical]`.
pub fn augment(tile: &Tile) -> Result<Vec<Tile>, TileError> {
    Dihedral::ALL.iter().map(|d| d.apply_tile(tile)).collect()
}

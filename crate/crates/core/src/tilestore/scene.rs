use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Tile, TileError};
use crate::geometry::Ring;

pub const DEFAULT_CHANNELS: usize = 8;

const PLACEMENT_ATTEMPTS: usize = 400;
const MIN_CENTER_CLEARANCE: f64 = 1e-3;

// Per-channel mean response of background and building pixels. Contrast is
// deliberately uneven across channels so that models seeing different channel
// subsets differ in quality.
const BACKGROUND: [f32; 8] = [0.30, 0.45, 0.40, 0.50, 0.42, 0.55, 0.28, 0.60];
const BUILDING: [f32; 8] = [0.55, 0.57, 0.30, 0.58, 0.47, 0.52, 0.48, 0.40];

/// Parameters of a synthetic building scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_buildings: usize,
    /// Inclusive side-length range in pixels.
    pub size_range: (usize, usize),
    /// Probability that a building is attached to an earlier axis-aligned one.
    pub adjacency_prob: f64,
    /// Probability that a free-standing building is rotated by a multiple of 15 degrees.
    pub rotation_prob: f64,
    pub channel_noise: f32,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            n_buildings: 6,
            size_range: (4, 12),
            adjacency_prob: 0.15,
            rotation_prob: 0.25,
            channel_noise: 0.1,
            channels: DEFAULT_CHANNELS,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), TileError> {
        let bad = |m: String| Err(TileError::InvalidSpec(m));
        if self.width < 32 || self.height < 32 {
            return bad(format!("tile {}x{} is smaller than 32x32", self.height, self.width));
        }
        if self.size_range.0 < 2 || self.size_range.0 > self.size_range.1 {
            return bad(format!("size range {:?} must satisfy 2 <= min <= max", self.size_range));
        }
        if !(0.0..=1.0).contains(&self.adjacency_prob) {
            return bad(format!("adjacency_prob {} outside [0, 1]", self.adjacency_prob));
        }
        if !(0.0..=1.0).contains(&self.rotation_prob) {
            return bad(format!("rotation_prob {} outside [0, 1]", self.rotation_prob));
        }
        if !(self.channel_noise >= 0.0 && self.channel_noise.is_finite()) {
            return bad(format!("channel_noise {} must be finite and >= 0", self.channel_noise));
        }
        if self.channels == 0 {
            return bad("channels must be >= 1".into());
        }
        Ok(())
    }
}

fn palette(channel: usize) -> (f32, f32) {
    let k = channel % BACKGROUND.len();
    // channels beyond the base palette get a shifted copy
    let shift = 0.03 * (channel / BACKGROUND.len()) as f32;
    let wrap = |v: f32| if v + shift > 0.95 { v - shift } else { v + shift };
    (wrap(BACKGROUND[k]), wrap(BUILDING[k]))
}

/// Channel names for `c` channels.
pub(crate) fn channel_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("band{i}")).collect()
}

struct Placement {
    occupied: Array2<u8>,
    /// Occupied pixels dilated by one pixel in all eight directions.
    blocked: Array2<u8>,
    axis_rects: Vec<(i64, i64, i64, i64)>,
    rings: Vec<Ring>,
}

impl Placement {
    fn new(h: usize, w: usize) -> Self {
        Placement {
            occupied: Array2::zeros((h, w)),
            blocked: Array2::zeros((h, w)),
            axis_rects: Vec::new(),
            rings: Vec::new(),
        }
    }

    fn pixels(&self, ring: &Ring) -> Vec<(usize, usize)> {
        let (h, w) = self.occupied.dim();
        let mut px = Vec::new();
        ring.for_each_pixel(h, w, |r, c| px.push((r, c)));
        px
    }

    fn commit(&mut self, ring: Ring, pixels: &[(usize, usize)]) {
        let (h, w) = self.occupied.dim();
        for &(r, c) in pixels {
            self.occupied[[r, c]] = 1;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        self.blocked[[rr as usize, cc as usize]] = 1;
                    }
                }
            }
        }
        self.rings.push(ring);
    }

    fn free_standing(&mut self, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> bool {
        let (lo, hi) = spec.size_range;
        let bw = rng.random_range(lo..=hi);
        let bh = rng.random_range(lo..=hi);
        let rotated = spec.rotation_prob > 0.0 && rng.random::<f64>() < spec.rotation_prob;
        let ring = if rotated {
            let angle = (rng.random_range(1..=5) as f64 * 15.0).to_radians();
            let cx = rng.random_range(0.0..spec.width as f64);
            let cy = rng.random_range(0.0..spec.height as f64);
            let (s, c) = angle.sin_cos();
            let (hw, hh) = (bw as f64 / 2.0, bh as f64 / 2.0);
            let corners = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
                .iter()
                .map(|&(dx, dy)| [cx + dx * c - dy * s, cy + dx * s + dy * c])
                .collect();
            let ring = Ring::closed(corners).canonical();
            if !ring.within(spec.width, spec.height)
                || ring.min_center_clearance(spec.height, spec.width) < MIN_CENTER_CLEARANCE
            {
                return false;
            }
            ring
        } else {
            if bw > spec.width || bh > spec.height {
                return false;
            }
            let x = rng.random_range(0..=spec.width - bw);
            let y = rng.random_range(0..=spec.height - bh);
            Ring::rect(x as f64, y as f64, bw as f64, bh as f64)
        };
        let pixels = self.pixels(&ring);
        if pixels.len() < 2 || pixels.iter().any(|&(r, c)| self.blocked[[r, c]] != 0) {
            return false;
        }
        if !rotated {
            let (x, y, _, _) = ring.bounds();
            self.axis_rects.push((x as i64, y as i64, bw as i64, bh as i64));
        }
        self.commit(ring, &pixels);
        true
    }

    fn attached(&mut self, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> bool {
        let (lo, hi) = spec.size_range;
        let (ax, ay, aw, ah) = self.axis_rects[rng.random_range(0..self.axis_rects.len())];
        let bw = rng.random_range(lo..=hi) as i64;
        let bh = rng.random_range(lo..=hi) as i64;
        // the shared edge run is at least two pixels long
        let (x, y) = match rng.random_range(0..4) {
            0 => (ax + aw, rng.random_range(ay - bh + 2..=ay + ah - 2)),
            1 => (ax - bw, rng.random_range(ay - bh + 2..=ay + ah - 2)),
            2 => (rng.random_range(ax - bw + 2..=ax + aw - 2), ay + ah),
            _ => (rng.random_range(ax - bw + 2..=ax + aw - 2), ay - bh),
        };
        if x < 0 || y < 0 || x + bw > spec.width as i64 || y + bh > spec.height as i64 {
            return false;
        }
        let ring = Ring::rect(x as f64, y as f64, bw as f64, bh as f64);
        let pixels = self.pixels(&ring);
        if pixels.iter().any(|&(r, c)| self.occupied[[r, c]] != 0) {
            return false;
        }
        self.axis_rects.push((x, y, bw, bh));
        self.commit(ring, &pixels);
        true
    }
}

/// Generates one synthetic scene; the tile id is derived from the seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<Tile, TileError> {
    generate_with_id(spec, format!("scene-{}", spec.seed))
}

pub(crate) fn generate_with_id(spec: &SceneSpec, id: String) -> Result<Tile, TileError> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placement = Placement::new(h, w);

    for placed in 0..spec.n_buildings {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let adjacent = !placement.axis_rects.is_empty()
                && spec.adjacency_prob > 0.0
                && rng.random::<f64>() < spec.adjacency_prob;
            ok = if adjacent {
                placement.attached(spec, &mut rng)
            } else {
                placement.free_standing(spec, &mut rng)
            };
            if ok {
                break;
            }
        }
        if !ok {
            return Err(TileError::Capacity { placed, requested: spec.n_buildings });
        }
    }

    let mask = placement.occupied;
    let mut channels = Array3::<f32>::zeros((c, h, w));
    let noise = (spec.channel_noise > 0.0)
        .then(|| Normal::new(0.0f32, spec.channel_noise).expect("validated noise"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_CAFE_F00D_D00D);
    for ch in 0..c {
        let (bg, fg) = palette(ch);
        for r in 0..h {
            for col in 0..w {
                let base = if mask[[r, col]] != 0 { fg } else { bg };
                let v = match &noise {
                    Some(n) => base + n.sample(&mut noise_rng),
                    None => base,
                };
                channels[[ch, r, col]] = v.clamp(0.0, 1.0);
            }
        }
    }

    Ok(Tile {
        id,
        channels,
        mask,
        polygons: placement.rings,
        channel_names: channel_names(c),
    })
}

/// Generates `n` tiles with ids `tile-0000`, `tile-0001`, ...; tile `i` uses a
/// seed derived from `(spec.seed, i)`.
pub fn generate_dataset(spec: &SceneSpec, n: usize) -> Result<Vec<Tile>, TileError> {
    (0..n)
        .map(|i| {
            let tile_spec = SceneSpec { seed: derive_seed(spec.seed, i as u64), ..spec.clone() };
            generate_with_id(&tile_spec, format!("tile-{i:04}"))
        })
        .collect()
}

/// Child seed for stream `index`, derived with a splitmix64 finalizer.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize;

    #[test]
    fn empty_scene() {
        let t = generate_scene(&SceneSpec { n_buildings: 0, ..Default::default() }).unwrap();
        assert_eq!(t.foreground_count(), 0);
        assert!(t.polygons.is_empty());
        t.validate().unwrap();
    }

    #[test]
    fn single_square() {
        let spec = SceneSpec {
            n_buildings: 1,
            size_range: (4, 4),
            channel_noise: 0.0,
            rotation_prob: 0.0,
            ..Default::default()
        };
        let t = generate_scene(&spec).unwrap();
        assert_eq!(t.foreground_count(), 16);
        assert_eq!(t.polygons.len(), 1);
        assert_eq!(t.polygons[0].area(), 16.0);
    }

    #[test]
    fn deterministic_replay() {
        let spec = SceneSpec { seed: 7, ..Default::default() };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        let bits = |t: &Tile| t.channels.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn polygons_rasterize_to_mask() {
        for seed in 0..40 {
            let spec = SceneSpec { seed, adjacency_prob: 0.4, rotation_prob: 0.5, ..Default::default() };
            let t = generate_scene(&spec).unwrap();
            assert_eq!(rasterize(&t.polygons, 64, 64), t.mask, "seed {seed}");
            t.validate().unwrap();
        }
    }

    #[test]
    fn overfull_scene_is_rejected() {
        let spec = SceneSpec { n_buildings: 200, size_range: (12, 16), ..Default::default() };
        assert!(matches!(generate_scene(&spec), Err(TileError::Capacity { .. })));
    }

    #[test]
    fn invalid_specs() {
        let small = SceneSpec { width: 16, ..Default::default() };
        assert!(matches!(small.validate(), Err(TileError::InvalidSpec(_))));
        let tiny = SceneSpec { size_range: (1, 3), ..Default::default() };
        assert!(tiny.validate().is_err());
        let prob = SceneSpec { adjacency_prob: 1.5, ..Default::default() };
        assert!(prob.validate().is_err());
    }

    #[test]
    fn dataset_ids_and_distinct_seeds() {
        let tiles = generate_dataset(&SceneSpec::default(), 3).unwrap();
        assert_eq!(tiles[2].id, "tile-0002");
        assert_ne!(tiles[0].mask, tiles[1].mask);
    }
}

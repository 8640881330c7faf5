use std::collections::HashMap;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segfuse_core::geometry::{rasterize, Ring};
use segfuse_core::jaccard::SegMap;
use segfuse_core::polygonize::{binarize, connected_components, extract_polygons, trace_contour};
use segfuse_core::tilestore::{generate_scene, SceneSpec};

fn random_mask(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Array2<u8> {
    Array2::from_shape_simple_fn((n, n), || rng.random_bool(density) as u8)
}

/// Recursive flood fill, written independently of the library labeller.
fn flood_oracle(mask: &Array2<u8>) -> Array2<u32> {
    fn fill(mask: &Array2<u8>, out: &mut Array2<u32>, r: isize, c: isize, label: u32) {
        let (h, w) = mask.dim();
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            return;
        }
        let (ru, cu) = (r as usize, c as usize);
        if mask[[ru, cu]] == 0 || out[[ru, cu]] != 0 {
            return;
        }
        out[[ru, cu]] = label;
        for dr in -1..=1 {
            for dc in -1..=1 {
                if dr != 0 || dc != 0 {
                    fill(mask, out, r + dr, c + dc, label);
                }
            }
        }
    }
    let mut out = Array2::zeros(mask.dim());
    let mut next = 0;
    for ((r, c), &v) in mask.indexed_iter() {
        if v != 0 && out[[r, c]] == 0 {
            next += 1;
            fill(mask, &mut out, r as isize, c as isize, next);
        }
    }
    out
}

/// Same partition up to renaming.
fn same_partition(a: &Array2<u32>, b: &Array2<u32>) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        (x == 0) == (y == 0) && *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
    })
}

/// Sets every background pixel not 4-connected to the border.
fn fill_holes(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut outside = Array2::<bool>::from_elem((h, w), false);
    let mut stack: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| [(r, 0), (r, w - 1)])
        .chain((0..w).flat_map(|c| [(0, c), (h - 1, c)]))
        .collect();
    while let Some((r, c)) = stack.pop() {
        if mask[[r, c]] != 0 || outside[[r, c]] {
            continue;
        }
        outside[[r, c]] = true;
        if r > 0 {
            stack.push((r - 1, c));
        }
        if r + 1 < h {
            stack.push((r + 1, c));
        }
        if c > 0 {
            stack.push((r, c - 1));
        }
        if c + 1 < w {
            stack.push((r, c + 1));
        }
    }
    Array2::from_shape_fn((h, w), |p| (!outside[p]) as u8)
}

#[test]
fn labels_match_flood_fill_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let mask = random_mask(&mut rng, 16, 0.2 + 0.4 * (i % 5) as f64 / 4.0);
        let comps = connected_components(&mask);
        let oracle = flood_oracle(&mask);
        assert!(same_partition(&comps.labels, &oracle), "mask {i}");
        assert_eq!(comps.count as u32, *oracle.iter().max().unwrap());
        // dense labels
        let mut seen = vec![false; comps.count + 1];
        comps.labels.iter().for_each(|&l| seen[l as usize] = true);
        assert!(seen[1..].iter().all(|&s| s));
    }
}

#[test]
fn hole_free_masks_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..100 {
        let mask = fill_holes(&random_mask(&mut rng, 16, 0.35 + 0.1 * (i % 3) as f64));
        let set = extract_polygons(&SegMap::from_mask(&mask), 0.5, 0.0);
        assert_eq!(rasterize(&set.rings(), 16, 16), mask, "mask {i}");
        for p in &set.polygons {
            assert!(p.ring.is_closed());
            assert_eq!(p.ring.area(), p.area, "mask {i}");
            assert!(p.ring.signed_area() > 0.0);
        }
    }
}

#[test]
fn each_ring_fills_its_component() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let mask = fill_holes(&random_mask(&mut rng, 12, 0.5));
        let comps = connected_components(&mask);
        for id in 1..=comps.count as u32 {
            let ring = trace_contour(&comps.labels, id).unwrap();
            let filled = rasterize(&[ring], 12, 12);
            let expected = comps.labels.mapv(|l| (l == id) as u8);
            assert_eq!(filled, expected);
        }
    }
}

#[test]
fn perfect_map_recovers_building_rectangle() {
    let spec = SceneSpec { n_buildings: 1, size_range: (5, 9), rotation_prob: 0.0, seed: 31, ..SceneSpec::default() };
    let tile = generate_scene(&spec).unwrap();
    let set = extract_polygons(&SegMap::from_mask(&tile.mask), 0.5, 0.0);
    assert_eq!(set.len(), 1);
    assert_eq!(set.polygons[0].ring, tile.polygons[0].canonical());
    assert_eq!(set.polygons[0].score, 1.0);
}

#[test]
fn bridged_buildings_fuse() {
    let a = Ring::rect(4.0, 4.0, 6.0, 5.0);
    let b = Ring::rect(11.0, 4.0, 5.0, 5.0);
    let mut pred = rasterize(&[a, b], 20, 20);
    assert_eq!(extract_polygons(&SegMap::from_mask(&pred), 0.5, 0.0).len(), 2);
    pred[[6, 10]] = 1;
    assert_eq!(extract_polygons(&SegMap::from_mask(&pred), 0.5, 0.0).len(), 1);
}

fn arb_map() -> impl Strategy<Value = Array2<f32>> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f32..=1.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

proptest! {
    #[test]
    fn components_partition_foreground(values in arb_map()) {
        let mask = binarize(&SegMap::new(values).unwrap(), 0.5);
        let comps = connected_components(&mask);
        let (h, w) = mask.dim();
        for ((r, c), &l) in comps.labels.indexed_iter() {
            prop_assert_eq!(l != 0, mask[[r, c]] != 0);
            for dr in 0..=1usize {
                for dc in 0..=2usize {
                    let (nr, nc) = (r + dr, (c + dc).wrapping_sub(1));
                    if (dr, dc) == (0, 1) || nr >= h || nc >= w {
                        continue;
                    }
                    let m = comps.labels[[nr, nc]];
                    if l != 0 && m != 0 {
                        prop_assert_eq!(l, m);
                    }
                }
            }
        }
    }

    #[test]
    fn raising_threshold_never_adds_area(values in arb_map(), t in 0.0f32..1.0, dt in 0.0f32..0.5) {
        let map = SegMap::new(values).unwrap();
        let lo: f64 = extract_polygons(&map, t, 0.0).polygons.iter().map(|p| p.area).sum();
        let hi: f64 = extract_polygons(&map, (t + dt).min(1.0), 0.0).polygons.iter().map(|p| p.area).sum();
        prop_assert!(hi <= lo);
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segfuse_core::geometry::Ring;
use segfuse_core::polygonize::PolygonSet;
use segfuse_core::scorer::{iou_matrix, match_polygons, MatchOrder};

const GRID: i64 = 24;

fn rect(rng: &mut ChaCha8Rng) -> (i64, i64, i64, i64) {
    let w = rng.random_range(2..7);
    let h = rng.random_range(2..7);
    (rng.random_range(0..GRID - w), rng.random_range(0..GRID - h), w, h)
}

fn overlaps(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> bool {
    a.0 < b.0 + b.2 && b.0 < a.0 + a.2 && a.1 < b.1 + b.3 && b.1 < a.1 + a.3
}

fn to_set(rects: &[(i64, i64, i64, i64)]) -> PolygonSet {
    let rings: Vec<Ring> =
        rects.iter().map(|&(x, y, w, h)| Ring::rect(x as f64, y as f64, w as f64, h as f64)).collect();
    PolygonSet::from_rings(&rings)
}

/// Up to `n` rectangles; pairwise disjoint when `disjoint` is set.
fn random_side(rng: &mut ChaCha8Rng, n: usize, disjoint: bool) -> Vec<(i64, i64, i64, i64)> {
    let mut out: Vec<(i64, i64, i64, i64)> = Vec::new();
    for _ in 0..n * 20 {
        if out.len() == n {
            break;
        }
        let r = rect(rng);
        if !disjoint || out.iter().all(|&o| !overlaps(o, r)) {
            out.push(r);
        }
    }
    out
}

/// Predictions partly derived from the ground truth so that matches occur.
fn perturbed(rng: &mut ChaCha8Rng, gts: &[(i64, i64, i64, i64)], disjoint: bool) -> Vec<(i64, i64, i64, i64)> {
    let mut out: Vec<(i64, i64, i64, i64)> = Vec::new();
    for &(x, y, w, h) in gts {
        if rng.random_bool(0.3) {
            continue;
        }
        let dx = rng.random_range(-1..=1);
        let dy = rng.random_range(-1..=1);
        let r = ((x + dx).clamp(0, GRID - w), (y + dy).clamp(0, GRID - h), w, h + rng.random_range(0..=1));
        if !disjoint || out.iter().all(|&o| !overlaps(o, r)) {
            out.push(r);
        }
    }
    let extra = rng.random_range(0..=2usize);
    for r in random_side(rng, extra, false) {
        if out.len() < 6 && (!disjoint || out.iter().all(|&o| !overlaps(o, r))) {
            out.push(r);
        }
    }
    out
}

/// Maximum number of disjoint pairs with IoU above the threshold, by exhaustive search.
fn exhaustive_tp(ious: &[Vec<f64>], threshold: f64) -> usize {
    fn go(ious: &[Vec<f64>], row: usize, used: &mut Vec<bool>, threshold: f64) -> usize {
        if row == ious.len() {
            return 0;
        }
        let mut best = go(ious, row + 1, used, threshold);
        for g in 0..used.len() {
            if !used[g] && ious[row][g] > threshold {
                used[g] = true;
                best = best.max(1 + go(ious, row + 1, used, threshold));
                used[g] = false;
            }
        }
        best
    }
    let n_gt = ious.first().map_or(0, Vec::len);
    go(ious, 0, &mut vec![false; n_gt], threshold)
}

fn divergences(seed: u64, disjoint: bool, threshold: f64) -> (Vec<String>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    let mut matched = 0;
    for i in 0..200 {
        let n = rng.random_range(0..=6);
        let gts = random_side(&mut rng, n, disjoint);
        let preds = perturbed(&mut rng, &gts, disjoint);
        let (p, g) = (to_set(&preds), to_set(&gts));
        let greedy = match_polygons(&p, &g, threshold, MatchOrder::Iou).summary.tp;
        let oracle = exhaustive_tp(&iou_matrix(&p, &g), threshold);
        assert!(greedy <= oracle);
        matched += oracle;
        if greedy != oracle {
            log.push(format!("instance {i}: greedy {greedy}, exhaustive {oracle}, preds {preds:?}, gts {gts:?}"));
        }
    }
    (log, matched)
}

#[test]
fn greedy_equals_exhaustive_at_half() {
    let (log, matched) = divergences(99, true, 0.5);
    for line in &log {
        eprintln!("{line}");
    }
    assert!(matched > 100, "only {matched} matches across instances");
    assert!(log.is_empty(), "{} divergences", log.len());
}

#[test]
fn greedy_divergences_below_half_are_logged() {
    // Below 0.5 a prediction can clear the threshold for two ground truths,
    // so greedy may fall short of the optimum; those cases are only reported.
    let (log, _) = divergences(7, false, 0.2);
    eprintln!("{} greedy/exhaustive divergences at IoU > 0.2 with overlapping polygons", log.len());
    for line in &log {
        eprintln!("{line}");
    }
}

fn arb_instance() -> impl Strategy<Value = (PolygonSet, PolygonSet)> {
    any::<u64>().prop_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(0..=6);
        let gts = random_side(&mut rng, n, true);
        let preds = perturbed(&mut rng, &gts, true);
        (to_set(&preds), to_set(&gts))
    })
}

proptest! {
    #[test]
    fn swapping_sides_swaps_errors((p, g) in arb_instance()) {
        let a = match_polygons(&p, &g, 0.5, MatchOrder::Iou).summary;
        let b = match_polygons(&g, &p, 0.5, MatchOrder::Iou).summary;
        prop_assert_eq!(a.tp, b.tp);
        prop_assert_eq!(a.fp, b.fn_);
        prop_assert_eq!(a.fn_, b.fp);
        prop_assert_eq!(a.f_score, b.f_score);
    }

    #[test]
    fn raising_threshold_never_adds_matches((p, g) in arb_instance(), t in 0.0f64..0.9, dt in 0.0f64..0.5) {
        let lo = match_polygons(&p, &g, t, MatchOrder::Iou).summary.tp;
        let hi = match_polygons(&p, &g, t + dt, MatchOrder::Iou).summary.tp;
        prop_assert!(hi <= lo);
    }

    #[test]
    fn report_invariants((p, g) in arb_instance()) {
        let r = match_polygons(&p, &g, 0.5, MatchOrder::Iou);
        let s = &r.summary;
        prop_assert_eq!(s.tp + s.fp, p.len());
        prop_assert_eq!(s.tp + s.fn_, g.len());
        prop_assert!((0.0..=1.0).contains(&s.f_score));
        prop_assert!(r.pairs.iter().all(|m| m.iou > 0.5));
        let mut preds: Vec<_> = r.pairs.iter().map(|m| m.pred).chain(r.fp_indices.iter().copied()).collect();
        preds.sort_unstable();
        prop_assert_eq!(preds, (0..p.len()).collect::<Vec<_>>());
        prop_assert_eq!(s.f_score == 1.0, s.fp == 0 && s.fn_ == 0);
        prop_assert_eq!(&r, &match_polygons(&p, &g, 0.5, MatchOrder::Iou));
    }
}

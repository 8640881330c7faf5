//! Building-level scoring: polygon IoU, greedy IoU matching, micro-averaged
//! precision/recall/F-score and gain against a baseline.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Ring;
use crate::jaccard::gain;
use crate::polygonize::PolygonSet;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("degenerate ring with zero area")]
    Degenerate,
    #[error("{preds} prediction sets for {gts} ground-truth sets")]
    LengthMismatch { preds: usize, gts: usize },
}

/// Pixels covered by a ring, sorted by `(row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSet(Vec<(i64, i64)>);

impl PixelSet {
    pub fn of(ring: &Ring) -> Self {
        let (x0, y0, x1, y1) = ring.bounds();
        let (ox, oy) = (x0.floor() as i64, y0.floor() as i64);
        let w = (x1.ceil() as i64 - ox).max(0) as usize;
        let h = (y1.ceil() as i64 - oy).max(0) as usize;
        let local = ring.map(|[x, y]| [x - ox as f64, y - oy as f64]);
        let mut pixels = Vec::new();
        local.for_each_pixel(h, w, |r, c| pixels.push((r as i64 + oy, c as i64 + ox)));
        pixels.sort_unstable();
        PixelSet(pixels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn intersection_len(&self, other: &PixelSet) -> usize {
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn iou(&self, other: &PixelSet) -> f64 {
        let inter = self.intersection_len(other);
        let union = self.len() + other.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Intersection over union at pixel resolution.
pub fn polygon_iou(a: &Ring, b: &Ring) -> Result<f64, ScoreError> {
    if a.area() == 0.0 || b.area() == 0.0 {
        return Err(ScoreError::Degenerate);
    }
    Ok(PixelSet::of(a).iou(&PixelSet::of(b)))
}

/// Order in which candidate pairs are offered to the greedy matcher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOrder {
    /// IoU descending.
    #[default]
    Iou,
    /// Prediction score descending, then IoU descending.
    Score,
}

impl FromStr for MatchOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iou" => Ok(MatchOrder::Iou),
            "score" => Ok(MatchOrder::Score),
            _ => Err(format!("unknown match order {s:?} (expected iou or score)")),
        }
    }
}

impl fmt::Display for MatchOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchOrder::Iou => "iou",
            MatchOrder::Score => "score",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Counts and the derived rates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// No predictions and no ground truth: scored `F = 1`.
    pub all_empty: bool,
}

impl Summary {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            return Summary { precision: 1.0, recall: 1.0, f_score: 1.0, all_empty: true, ..Summary::default() };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f_score = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Summary { tp, fp, fn_, precision, recall, f_score, all_empty: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_id: Option<String>,
    pub pairs: Vec<MatchPair>,
    pub fp_indices: Vec<usize>,
    pub fn_indices: Vec<usize>,
    #[serde(flatten)]
    pub summary: Summary,
}

/// IoU of every (prediction, ground truth) pair.
pub fn iou_matrix(preds: &PolygonSet, gts: &PolygonSet) -> Vec<Vec<f64>> {
    let gp: Vec<_> = gts.polygons.iter().map(|p| PixelSet::of(&p.ring)).collect();
    preds
        .polygons
        .iter()
        .map(|p| {
            let a = PixelSet::of(&p.ring);
            gp.iter().map(|b| a.iou(b)).collect()
        })
        .collect()
}

/// Greedy one-to-one matching of pairs with `IoU > iou_threshold`.
///
/// Ties are broken by lower prediction index, then lower ground-truth index.
pub fn match_polygons(preds: &PolygonSet, gts: &PolygonSet, iou_threshold: f64, order: MatchOrder) -> MatchReport {
    let ious = iou_matrix(preds, gts);
    let mut candidates: Vec<MatchPair> = ious
        .iter()
        .enumerate()
        .flat_map(|(p, row)| {
            row.iter().enumerate().filter(|(_, &v)| v > iou_threshold).map(move |(g, &iou)| MatchPair { pred: p, gt: g, iou })
        })
        .collect();
    let by_iou = |a: &MatchPair, b: &MatchPair| b.iou.total_cmp(&a.iou).then(a.pred.cmp(&b.pred)).then(a.gt.cmp(&b.gt));
    match order {
        MatchOrder::Iou => candidates.sort_by(by_iou),
        MatchOrder::Score => candidates.sort_by(|a, b| {
            let (sa, sb) = (preds.polygons[a.pred].score, preds.polygons[b.pred].score);
            sb.total_cmp(&sa).then(by_iou(a, b))
        }),
    }
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !pred_used[c.pred] && !gt_used[c.gt] {
            pred_used[c.pred] = true;
            gt_used[c.gt] = true;
            pairs.push(c);
        }
    }
    let unused = |used: &[bool]| used.iter().enumerate().filter(|(_, &u)| !u).map(|(i, _)| i).collect::<Vec<_>>();
    let (fp_indices, fn_indices) = (unused(&pred_used), unused(&gt_used));
    let summary = Summary::from_counts(pairs.len(), fp_indices.len(), fn_indices.len());
    MatchReport { tile_id: None, pairs, fp_indices, fn_indices, summary }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub iou_threshold: f64,
    pub match_order: MatchOrder,
    pub tiles: Vec<MatchReport>,
    pub aggregate: Summary,
}

/// Per-tile matching with TP/FP/FN summed before the rates are computed.
pub fn score_run(
    pred_sets: &[PolygonSet],
    gt_sets: &[PolygonSet],
    iou_threshold: f64,
    order: MatchOrder,
) -> Result<RunReport, ScoreError> {
    if pred_sets.len() != gt_sets.len() {
        return Err(ScoreError::LengthMismatch { preds: pred_sets.len(), gts: gt_sets.len() });
    }
    let tiles: Vec<MatchReport> =
        pred_sets.iter().zip(gt_sets).map(|(p, g)| match_polygons(p, g, iou_threshold, order)).collect();
    let (tp, fp, fn_) = tiles.iter().fold((0, 0, 0), |(a, b, c), t| (a + t.summary.tp, b + t.summary.fp, c + t.summary.fn_));
    let aggregate = Summary::from_counts(tp, fp, fn_);
    if aggregate.all_empty {
        log::warn!("no predictions and no ground truth in any tile; F-score defined as 1");
    }
    Ok(RunReport { iou_threshold, match_order: order, tiles, aggregate })
}

/// Fixed-width comparison table with a gain column relative to `baseline`.
pub fn score_table(rows: &[(String, Summary)], baseline: &str) -> String {
    let base = rows.iter().find(|(n, _)| n == baseline).map(|(_, s)| s.f_score);
    let mut out = String::new();
    writeln!(
        out,
        "{:<10} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9}",
        "fusion", "TP", "FP", "FN", "precision", "recall", "F-score", "gain"
    )
    .unwrap();
    for (name, s) in rows {
        let g = match base.map(|b| gain(s.f_score, b)) {
            Some(Ok(g)) => format!("{:+.2}%", 100.0 * g),
            _ => "n/a".into(),
        };
        writeln!(
            out,
            "{:<10} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9}",
            name, s.tp, s.fp, s.fn_, s.precision, s.recall, s.f_score, g
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polygonize::Polygon;

    fn set(rings: &[Ring]) -> PolygonSet {
        PolygonSet::from_rings(rings)
    }

    #[test]
    fn iou_examples() {
        let a = Ring::rect(1.0, 1.0, 3.0, 2.0);
        assert_eq!(polygon_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(polygon_iou(&a, &Ring::rect(10.0, 10.0, 2.0, 2.0)).unwrap(), 0.0);
        // squares of side 2 overlapping in half their area
        let iou = polygon_iou(&Ring::rect(0.0, 0.0, 2.0, 2.0), &Ring::rect(1.0, 0.0, 2.0, 2.0)).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        let flat = Ring::closed(vec![[0.0, 0.0], [2.0, 0.0], [4.0, 0.0]]);
        assert_eq!(polygon_iou(&flat, &a), Err(ScoreError::Degenerate));
    }

    #[test]
    fn perfect_match() {
        let rings = [Ring::rect(0.0, 0.0, 3.0, 3.0), Ring::rect(5.0, 5.0, 2.0, 4.0)];
        let r = match_polygons(&set(&rings), &set(&rings), 0.5, MatchOrder::Iou);
        assert_eq!(r.summary.tp, 2);
        assert_eq!(r.summary.f_score, 1.0);
    }

    #[test]
    fn two_of_three() {
        let gts = [Ring::rect(0.0, 0.0, 4.0, 4.0), Ring::rect(10.0, 0.0, 4.0, 4.0), Ring::rect(20.0, 0.0, 4.0, 4.0)];
        let preds = [Ring::rect(0.0, 0.0, 4.0, 3.0), Ring::rect(10.0, 1.0, 4.0, 4.0), Ring::rect(0.0, 20.0, 2.0, 2.0)];
        let r = match_polygons(&set(&preds), &set(&gts), 0.5, MatchOrder::Iou);
        assert_eq!((r.summary.tp, r.summary.fp, r.summary.fn_), (2, 1, 1));
        assert!((r.summary.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.summary.f_score - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.fp_indices, vec![2]);
        assert_eq!(r.fn_indices, vec![2]);
    }

    #[test]
    fn threshold_is_strict() {
        // IoU exactly 0.5
        let a = Ring::rect(0.0, 0.0, 4.0, 2.0);
        let b = Ring::rect(0.0, 0.0, 2.0, 2.0);
        assert_eq!(polygon_iou(&a, &b).unwrap(), 0.5);
        assert_eq!(match_polygons(&set(&[a]), &set(&[b]), 0.5, MatchOrder::Iou).summary.tp, 0);
    }

    #[test]
    fn micro_average() {
        let one = set(&[Ring::rect(0.0, 0.0, 2.0, 2.0)]);
        let two_preds = set(&[Ring::rect(0.0, 0.0, 2.0, 2.0), Ring::rect(8.0, 8.0, 2.0, 2.0)]);
        let two_gts = set(&[Ring::rect(0.0, 0.0, 2.0, 2.0), Ring::rect(4.0, 4.0, 2.0, 2.0)]);
        let run = score_run(&[one.clone(), two_preds], &[one, two_gts], 0.5, MatchOrder::Iou).unwrap();
        let s = &run.aggregate;
        assert_eq!((s.tp, s.fp, s.fn_), (2, 1, 1));
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f_score - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_cases() {
        let gts = set(&[Ring::rect(0.0, 0.0, 2.0, 2.0)]);
        let run = score_run(&[PolygonSet::default()], &[gts], 0.5, MatchOrder::Iou).unwrap();
        assert_eq!(run.aggregate.f_score, 0.0);
        let run = score_run(&[PolygonSet::default()], &[PolygonSet::default()], 0.5, MatchOrder::Iou).unwrap();
        assert_eq!(run.aggregate.f_score, 1.0);
        assert!(run.aggregate.all_empty);
        assert!(score_run(&[], &[PolygonSet::default()], 0.5, MatchOrder::Iou).is_err());
    }

    #[test]
    fn score_order_prefers_confident_predictions() {
        let gt = set(&[Ring::rect(0.0, 0.0, 4.0, 4.0)]);
        let mut preds = set(&[Ring::rect(0.0, 0.0, 4.0, 4.0), Ring::rect(0.0, 0.0, 4.0, 3.0)]);
        preds.polygons[0].score = 0.6;
        preds.polygons[1].score = 0.9;
        let by_iou = match_polygons(&preds, &gt, 0.5, MatchOrder::Iou);
        assert_eq!(by_iou.pairs[0].pred, 0);
        let by_score = match_polygons(&preds, &gt, 0.5, MatchOrder::Score);
        assert_eq!(by_score.pairs[0].pred, 1);
    }

    #[test]
    fn tie_break_by_index() {
        let gt = set(&[Ring::rect(0.0, 0.0, 4.0, 4.0)]);
        let preds = PolygonSet {
            polygons: vec![
                Polygon { ring: Ring::rect(0.0, 0.0, 4.0, 3.0), area: 12.0, component_id: 1, score: 1.0 },
                Polygon { ring: Ring::rect(0.0, 1.0, 4.0, 3.0), area: 12.0, component_id: 2, score: 1.0 },
            ],
        };
        let r = match_polygons(&preds, &gt, 0.5, MatchOrder::Iou);
        assert_eq!(r.pairs[0].pred, 0);
        assert_eq!(r.fp_indices, vec![1]);
    }

    #[test]
    fn table_gain_column() {
        let s = |f: f64| Summary { f_score: f, ..Summary::default() };
        let table = score_table(&[("average".into(), s(0.6805)), ("deep".into(), s(0.7080))], "average");
        assert!(table.lines().nth(1).unwrap().ends_with("+0.00%"));
        assert!(table.lines().nth(2).unwrap().ends_with("+4.04%"), "{table}");
        let zero = score_table(&[("average".into(), s(0.0)), ("deep".into(), s(0.5))], "average");
        assert!(zero.lines().nth(2).unwrap().ends_with("n/a"));
    }

    #[test]
    fn order_parsing() {
        assert_eq!("score".parse::<MatchOrder>().unwrap(), MatchOrder::Score);
        assert!("area".parse::<MatchOrder>().is_err());
    }
}

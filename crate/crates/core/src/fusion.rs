//! Fusion of member segmentations.
//!
//! Four strategies are provided: the per-pixel unweighted average, majority
//! voting with an uncertainty map, a trained `1x1xm` linear combiner, and a
//! deep U-Net combiner that also sees the raw input channels. The deep
//! combiner's input stack is `[map_1, ..., map_m, channel_1, ..., channel_C]`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jaccard::{JaccardError, SegMap};
use crate::segnet::{load_model, Architecture, Model, ModelError};
use crate::tilestore::{Tile, TileError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no segmentation maps to fuse")]
    Empty,
    #[error("segmentation map {index} is {found:?}, expected {expected:?}")]
    ShapeMismatch { index: usize, expected: (usize, usize), found: (usize, usize) },
    #[error("combiner expects {expected} input channels, got {found}")]
    Arity { expected: usize, found: usize },
    #[error("an ensemble needs at least two members, got {0}")]
    TooFewMembers(usize),
    #[error("{0}")]
    Combiner(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Map(#[from] JaccardError),
    #[error("ensemble manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Average,
    Vote,
    Linear,
    Deep,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [FusionKind::Average, FusionKind::Vote, FusionKind::Linear, FusionKind::Deep];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Average => "average",
            FusionKind::Vote => "vote",
            FusionKind::Linear => "linear",
            FusionKind::Deep => "deep",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown fusion kind {s:?} (expected average, vote, linear or deep)"))
    }
}

fn common_shape(maps: &[SegMap]) -> Result<(usize, usize), FusionError> {
    let first = maps.first().ok_or(FusionError::Empty)?.dim();
    for (index, m) in maps.iter().enumerate() {
        if m.dim() != first {
            return Err(FusionError::ShapeMismatch { index, expected: first, found: m.dim() });
        }
    }
    Ok(first)
}

/// Per-pixel arithmetic mean.
pub fn fuse_average(maps: &[SegMap]) -> Result<SegMap, FusionError> {
    let shape = common_shape(maps)?;
    let mut acc = Array2::<f64>::zeros(shape);
    for m in maps {
        acc.zip_mut_with(m.values(), |a, &v| *a += v as f64);
    }
    let n = maps.len() as f64;
    Ok(SegMap::new(acc.mapv(|s| ((s / n) as f32).clamp(0.0, 1.0)))?)
}

/// Output of [`fuse_vote`].
#[derive(Clone, Debug, PartialEq)]
pub struct VoteResult {
    /// Fraction `k/m` of members voting foreground.
    pub votes: SegMap,
    /// `1 − |2·k/m − 1|`: 0 when unanimous, 1 on an even split.
    pub uncertainty: SegMap,
    /// Set when `m` is even and exact ties are possible.
    pub tie_possible: bool,
}

/// Majority voting after binarizing each member at `threshold` (`>=` is a vote).
pub fn fuse_vote(maps: &[SegMap], threshold: f32) -> Result<VoteResult, FusionError> {
    let shape = common_shape(maps)?;
    let mut counts = Array2::<u32>::zeros(shape);
    for m in maps {
        counts.zip_mut_with(m.values(), |c, &v| *c += (v >= threshold) as u32);
    }
    let n = maps.len() as f32;
    let votes = counts.mapv(|k| k as f32 / n);
    let uncertainty = votes.mapv(|f| 1.0 - (2.0 * f - 1.0).abs());
    Ok(VoteResult {
        votes: SegMap::new(votes)?,
        uncertainty: SegMap::new(uncertainty)?,
        tie_possible: maps.len() % 2 == 0,
    })
}

fn check_pointwise(combiner: &Model, m: usize) -> Result<(), FusionError> {
    match combiner.architecture() {
        Architecture::Pointwise { in_channels, .. } if *in_channels == m => Ok(()),
        Architecture::Pointwise { in_channels, .. } => Err(FusionError::Arity { expected: *in_channels, found: m }),
        Architecture::UNet(_) => Err(FusionError::Combiner("linear fusion needs a 1x1 combiner".into())),
    }
}

/// Stacks maps into an `m x H x W` array.
pub fn stack_maps(maps: &[SegMap]) -> Result<Array3<f32>, FusionError> {
    common_shape(maps)?;
    let views: Vec<_> = maps.iter().map(|m| m.view().insert_axis(Axis(0))).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("shapes checked"))
}

/// `Σ wᵢ·mapᵢ + b` before the squashing.
pub fn linear_presquash(maps: &[SegMap], combiner: &Model) -> Result<Array2<f32>, FusionError> {
    let shape = common_shape(maps)?;
    check_pointwise(combiner, maps.len())?;
    let w = combiner.tensor("head.weight").expect("pointwise layout");
    let b = combiner.tensor("head.bias").map_or(0.0, |b| b[0]);
    let mut acc = Array2::<f32>::from_elem(shape, b);
    for (m, &wi) in maps.iter().zip(w) {
        acc.zip_mut_with(m.values(), |a, &v| *a += wi * v);
    }
    Ok(acc)
}

/// Trained per-pixel weighted sum of the members, squashed to `(0, 1)`.
pub fn fuse_linear(maps: &[SegMap], combiner: &Model) -> Result<SegMap, FusionError> {
    check_pointwise(combiner, maps.len())?;
    let stacked = stack_maps(maps)?;
    Ok(SegMap::new(combiner.predict(stacked.view())?)?)
}

/// `[map_1..map_m, channel_1..channel_C]`.
pub fn stack_inputs(maps: &[SegMap], channels: ArrayView3<'_, f32>) -> Result<Array3<f32>, FusionError> {
    let shape = common_shape(maps)?;
    let (_, h, w) = channels.dim();
    if (h, w) != shape {
        return Err(FusionError::ShapeMismatch { index: maps.len(), expected: shape, found: (h, w) });
    }
    let stacked = stack_maps(maps)?;
    Ok(ndarray::concatenate(Axis(0), &[stacked.view(), channels]).expect("shapes checked"))
}

/// Deep combiner over member maps plus the raw input channels.
pub fn fuse_deep(maps: &[SegMap], channels: ArrayView3<'_, f32>, combiner: &Model) -> Result<SegMap, FusionError> {
    let found = maps.len() + channels.dim().0;
    if combiner.in_channels() != found {
        return Err(FusionError::Arity { expected: combiner.in_channels(), found });
    }
    let input = stack_inputs(maps, channels)?;
    Ok(SegMap::new(combiner.predict(input.view())?)?)
}

/// Anything that turns a tile into a probability map.
pub trait Predictor: Sync {
    fn predict_tile(&self, tile: &Tile) -> Result<SegMap, FusionError>;
}

impl<F> Predictor for F
where
    F: Fn(&Tile) -> Result<SegMap, FusionError> + Sync,
{
    fn predict_tile(&self, tile: &Tile) -> Result<SegMap, FusionError> {
        self(tile)
    }
}

/// A frozen base model reading a fixed subset of the tile's channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub model: Model,
    pub channels: Vec<usize>,
}

impl Member {
    pub fn new(model: Model, channels: Vec<usize>) -> Result<Self, FusionError> {
        if model.in_channels() != channels.len() {
            return Err(FusionError::Arity { expected: model.in_channels(), found: channels.len() });
        }
        Ok(Member { model, channels })
    }
}

impl Predictor for Member {
    fn predict_tile(&self, tile: &Tile) -> Result<SegMap, FusionError> {
        let input = tile.select_channels(&self.channels)?;
        Ok(SegMap::new(self.model.predict(input.view())?)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Fusion {
    Average,
    Vote { threshold: f32 },
    Linear(Model),
    Deep(Model),
}

impl Fusion {
    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Average => FusionKind::Average,
            Fusion::Vote { .. } => FusionKind::Vote,
            Fusion::Linear(_) => FusionKind::Linear,
            Fusion::Deep(_) => FusionKind::Deep,
        }
    }
}

/// Members plus the rule that merges their outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<Member>,
    fusion: Fusion,
    /// Raw channel count the deep combiner was built for.
    n_channels: Option<usize>,
}

impl Ensemble {
    /// `n_channels` is the tile channel count `C`; only the deep combiner uses it.
    pub fn new(members: Vec<Member>, fusion: Fusion, n_channels: usize) -> Result<Self, FusionError> {
        let m = members.len();
        if m < 2 {
            return Err(FusionError::TooFewMembers(m));
        }
        match &fusion {
            Fusion::Linear(c) => check_pointwise(c, m)?,
            Fusion::Deep(c) => {
                if !matches!(c.architecture(), Architecture::UNet(_)) {
                    return Err(FusionError::Combiner("deep fusion needs a U-Net combiner".into()));
                }
                if c.in_channels() != m + n_channels {
                    return Err(FusionError::Arity { expected: c.in_channels(), found: m + n_channels });
                }
            }
            Fusion::Average | Fusion::Vote { .. } => {}
        }
        Ok(Ensemble { members, fusion, n_channels: Some(n_channels) })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn n_channels(&self) -> Option<usize> {
        self.n_channels
    }

    /// Member inference, run concurrently.
    pub fn member_maps(&self, tile: &Tile) -> Result<Vec<SegMap>, FusionError> {
        self.members.par_iter().map(|m| m.predict_tile(tile)).collect()
    }

    /// Fuses precomputed member maps for `tile`.
    pub fn fuse(&self, maps: &[SegMap], tile: &Tile) -> Result<SegMap, FusionError> {
        match &self.fusion {
            Fusion::Average => fuse_average(maps),
            Fusion::Vote { threshold } => Ok(fuse_vote(maps, *threshold)?.votes),
            Fusion::Linear(c) => fuse_linear(maps, c),
            Fusion::Deep(c) => fuse_deep(maps, tile.channels.view(), c),
        }
    }
}

impl Predictor for Ensemble {
    fn predict_tile(&self, tile: &Tile) -> Result<SegMap, FusionError> {
        let maps = self.member_maps(tile)?;
        self.fuse(&maps, tile)
    }
}

pub const ENSEMBLE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    /// Checkpoint directory relative to the manifest; absent if never trained.
    pub checkpoint: Option<String>,
    pub channels: Vec<usize>,
}

/// `ensemble.json`: what was trained and where its checkpoints live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub schema_version: u32,
    pub complete: bool,
    pub n_channels: usize,
    pub members: Vec<MemberEntry>,
    pub fusion_kinds: Vec<FusionKind>,
    pub linear_combiner: Option<String>,
    pub deep_combiner: Option<String>,
    pub vote_threshold: f32,
    pub stacking: String,
}

impl Default for EnsembleManifest {
    fn default() -> Self {
        EnsembleManifest {
            schema_version: ENSEMBLE_SCHEMA_VERSION,
            complete: false,
            n_channels: 0,
            members: Vec::new(),
            fusion_kinds: FusionKind::ALL.to_vec(),
            linear_combiner: None,
            deep_combiner: None,
            vote_threshold: 0.5,
            stacking: "in_sample".into(),
        }
    }
}

impl EnsembleManifest {
    pub const FILE: &'static str = "ensemble.json";

    pub fn save(&self, dir: &Path) -> Result<(), FusionError> {
        let path = dir.join(Self::FILE);
        let text = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(&path, text).map_err(|e| FusionError::Manifest { path: path.display().to_string(), reason: e.to_string() })
    }

    pub fn load(dir: &Path) -> Result<Self, FusionError> {
        let path = dir.join(Self::FILE);
        let err = |reason: String| FusionError::Manifest { path: path.display().to_string(), reason };
        let text = fs::read_to_string(&path).map_err(|e| err(e.to_string()))?;
        let m: EnsembleManifest = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if m.schema_version != ENSEMBLE_SCHEMA_VERSION {
            return Err(err(format!("unsupported schema_version {}", m.schema_version)));
        }
        Ok(m)
    }

    /// Loads the members and the combiner `kind` needs from checkpoints under `dir`.
    pub fn ensemble(&self, dir: &Path, kind: FusionKind) -> Result<Ensemble, FusionError> {
        let missing = |what: &str| FusionError::Manifest {
            path: dir.join(Self::FILE).display().to_string(),
            reason: format!("{what} was not trained (run incomplete)"),
        };
        let members = self
            .members
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let ckpt = e.checkpoint.as_ref().ok_or_else(|| missing(&format!("member {i}")))?;
                Member::new(load_model(&dir.join(ckpt))?, e.channels.clone())
            })
            .collect::<Result<Vec<_>, _>>()?;
        let fusion = match kind {
            FusionKind::Average => Fusion::Average,
            FusionKind::Vote => Fusion::Vote { threshold: self.vote_threshold },
            FusionKind::Linear => {
                let p = self.linear_combiner.as_ref().ok_or_else(|| missing("linear combiner"))?;
                Fusion::Linear(load_model(&dir.join(p))?)
            }
            FusionKind::Deep => {
                let p = self.deep_combiner.as_ref().ok_or_else(|| missing("deep combiner"))?;
                Fusion::Deep(load_model(&dir.join(p))?)
            }
        };
        Ensemble::new(members, fusion, self.n_channels)
    }
}

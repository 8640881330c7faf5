//! End-to-end ensemble training: base members, member inference, then the
//! linear and deep combiners.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, Sample, TrainConfig, TrainError, TrainLog};
use crate::fusion::{
    stack_inputs, stack_maps, Ensemble, EnsembleManifest, Fusion, FusionKind, Member, MemberEntry, Predictor,
};
use crate::jaccard::SegMap;
use crate::segnet::{build_pointwise, build_unet, init_weights, Activation, Model, UNetConfig};
use crate::tilestore::{derive_seed, Tile};

/// U-Net hyperparameters without the input arity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetShape {
    pub depth: usize,
    pub base_width: usize,
    pub conv_per_block: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape::from(&UNetConfig::reference(1))
    }
}

impl From<&UNetConfig> for NetShape {
    fn from(c: &UNetConfig) -> Self {
        NetShape {
            depth: c.depth,
            base_width: c.base_width,
            conv_per_block: c.conv_per_block,
            activation: c.activation,
            bias: c.bias,
        }
    }
}

impl NetShape {
    pub fn config(&self, in_channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            depth: self.depth,
            base_width: self.base_width,
            conv_per_block: self.conv_per_block,
            activation: self.activation,
            bias: self.bias,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub channels: Vec<usize>,
    #[serde(default)]
    pub net: NetShape,
}

/// Where the combiners' training inputs come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Stacking {
    /// Final members predict their own training tiles.
    #[default]
    InSample,
    /// Each training tile is predicted by members trained without its fold.
    CrossFit { folds: usize },
}

impl Stacking {
    pub fn label(&self) -> String {
        match self {
            Stacking::InSample => "in_sample".into(),
            Stacking::CrossFit { folds } => format!("cross_fit:{folds}"),
        }
    }
}

/// Stage seeds are derived from `seed`; the `seed` fields of the three
/// train configs are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub members: Vec<MemberSpec>,
    pub deep: NetShape,
    pub base_train: TrainConfig,
    pub linear_train: TrainConfig,
    pub deep_train: TrainConfig,
    pub stacking: Stacking,
    pub vote_threshold: f32,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let member = |channels: Vec<usize>| MemberSpec { channels, net: NetShape::default() };
        PipelineConfig {
            members: vec![member(vec![0, 1, 2]), member(vec![3, 4, 5]), member(vec![0, 6, 7])],
            deep: NetShape::default(),
            base_train: TrainConfig::default(),
            linear_train: TrainConfig::default(),
            deep_train: TrainConfig::default(),
            stacking: Stacking::InSample,
            vote_threshold: 0.5,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, n_channels: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.members.len() < 2 {
            return bad(format!("an ensemble needs at least two members, got {}", self.members.len()));
        }
        for (i, m) in self.members.iter().enumerate() {
            if m.channels.is_empty() {
                return bad(format!("member {i} has no channels"));
            }
            if let Some(&c) = m.channels.iter().find(|&&c| c >= n_channels) {
                return bad(format!("member {i} uses channel {c} but tiles have {n_channels}"));
            }
            m.net.config(m.channels.len()).validate()?;
        }
        self.deep.config(self.members.len() + n_channels).validate()?;
        if let Stacking::CrossFit { folds } = self.stacking {
            if folds < 2 {
                return bad("cross-fit stacking needs at least two folds".into());
            }
        }
        if !(0.0..=1.0).contains(&self.vote_threshold) {
            return bad("vote_threshold must lie in [0, 1]".into());
        }
        for t in [&self.base_train, &self.linear_train, &self.deep_train] {
            t.validate()?;
        }
        Ok(())
    }

    fn stage(&self, base: &TrainConfig, stream: u64) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, stream), ..base.clone() }
    }
}

/// Everything [`train_pipeline`] produces.
#[derive(Clone, Debug)]
pub struct EnsembleArtifacts {
    pub members: Vec<Member>,
    pub linear: Model,
    pub deep: Model,
    /// `(name, log)` for each member, then `linear` and `deep`.
    pub logs: Vec<(String, TrainLog)>,
    pub n_channels: usize,
    pub vote_threshold: f32,
}

impl EnsembleArtifacts {
    pub fn ensemble(&self, kind: FusionKind) -> Ensemble {
        let fusion = match kind {
            FusionKind::Average => Fusion::Average,
            FusionKind::Vote => Fusion::Vote { threshold: self.vote_threshold },
            FusionKind::Linear => Fusion::Linear(self.linear.clone()),
            FusionKind::Deep => Fusion::Deep(self.deep.clone()),
        };
        Ensemble::new(self.members.clone(), fusion, self.n_channels).expect("validated during training")
    }
}

fn member_name(i: usize) -> String {
    format!("member{i}")
}

fn train_member(
    spec: &MemberSpec,
    index: usize,
    stream: u64,
    train_tiles: &[Tile],
    val_tiles: &[Tile],
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<(Member, TrainLog), TrainError> {
    let samples = |tiles: &[Tile]| -> Result<Vec<Sample>, TrainError> {
        tiles.iter().map(|t| Ok(Sample::from_tile(t, &spec.channels)?)).collect()
    };
    let (train_set, val_set) = (samples(train_tiles)?, samples(val_tiles)?);
    let mut model = build_unet(&spec.net.config(spec.channels.len()))?;
    model = init_weights(model, derive_seed(cfg.seed, stream));
    let ckpt = out.map(|o| o.join("models").join(member_name(index)));
    let log = train(&mut model, &train_set, &val_set, &cfg.stage(&cfg.base_train, stream + 1), ckpt.as_deref())?;
    Ok((Member::new(model, spec.channels.clone())?, log))
}

fn train_members(
    train_tiles: &[Tile],
    val_tiles: &[Tile],
    cfg: &PipelineConfig,
    stream: u64,
    out: Option<&Path>,
) -> Result<Vec<(Member, TrainLog)>, TrainError> {
    cfg.members
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            train_member(spec, i, stream + 2 * i as u64, train_tiles, val_tiles, cfg, out)
                .map_err(|e| e.in_stage(format!("train {}", member_name(i))))
        })
        .collect()
}

/// Member probability maps for every tile.
pub fn member_maps(members: &[Member], tiles: &[Tile]) -> Result<Vec<Vec<SegMap>>, TrainError> {
    tiles
        .iter()
        .map(|t| members.par_iter().map(|m| Ok(m.predict_tile(t)?)).collect())
        .collect()
}

/// Out-of-fold member maps: tile `i` is predicted by members trained on the
/// other folds (fold of tile `i` is `i % folds`).
pub fn cross_fit_maps(
    train_tiles: &[Tile],
    val_tiles: &[Tile],
    cfg: &PipelineConfig,
    folds: usize,
) -> Result<Vec<Vec<SegMap>>, TrainError> {
    let mut maps: Vec<Option<Vec<SegMap>>> = vec![None; train_tiles.len()];
    for k in 0..folds {
        let (held, kept): (Vec<_>, Vec<_>) = (0..train_tiles.len()).partition(|i| i % folds == k);
        if held.is_empty() || kept.is_empty() {
            continue;
        }
        let kept: Vec<Tile> = kept.iter().map(|&i| train_tiles[i].clone()).collect();
        let held_tiles: Vec<Tile> = held.iter().map(|&i| train_tiles[i].clone()).collect();
        let members: Vec<Member> = train_members(&kept, val_tiles, cfg, 1000 + 100 * k as u64, None)
            .map_err(|e| e.in_stage(format!("cross-fit fold {k}")))?
            .into_iter()
            .map(|(m, _)| m)
            .collect();
        for (i, m) in held.into_iter().zip(member_maps(&members, &held_tiles)?) {
            maps[i] = Some(m);
        }
    }
    maps.into_iter()
        .map(|m| m.ok_or(TrainError::InvalidConfig("more folds than training tiles".into())))
        .collect()
}

fn write_manifest(out: &Path, cfg: &PipelineConfig, n_channels: usize, done: &[String], complete: bool) {
    let has = |name: &str| done.iter().any(|d| d == name);
    let manifest = EnsembleManifest {
        complete,
        n_channels,
        members: cfg
            .members
            .iter()
            .enumerate()
            .map(|(i, m)| MemberEntry {
                checkpoint: has(&member_name(i)).then(|| format!("models/{}", member_name(i))),
                channels: m.channels.clone(),
            })
            .collect(),
        linear_combiner: has("linear").then(|| "models/linear".into()),
        deep_combiner: has("deep").then(|| "models/deep".into()),
        vote_threshold: cfg.vote_threshold,
        stacking: cfg.stacking.label(),
        ..EnsembleManifest::default()
    };
    if let Err(e) = manifest.save(out) {
        log::warn!("could not write ensemble manifest: {e}");
    }
}

/// Trains the members, then both combiners on the members' predictions.
///
/// With `out` set, checkpoints go to `out/models/<name>`, per-epoch logs to
/// `out/logs/<name>.jsonl` and the manifest to `out/ensemble.json`. A failed
/// run leaves a manifest marked incomplete that lists what was finished.
pub fn train_pipeline(
    train_tiles: &[Tile],
    val_tiles: &[Tile],
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<EnsembleArtifacts, TrainError> {
    let n_channels = train_tiles.first().ok_or(TrainError::EmptySplit("no training tiles"))?.n_channels();
    if val_tiles.is_empty() {
        return Err(TrainError::EmptySplit("no validation tiles"));
    }
    if let Some(t) = train_tiles.iter().chain(val_tiles).find(|t| t.n_channels() != n_channels) {
        return Err(TrainError::InvalidConfig(format!("tile {} has {} channels, expected {n_channels}", t.id, t.n_channels())));
    }
    cfg.validate(n_channels)?;
    if let Some(o) = out {
        let logs = o.join("logs");
        std::fs::create_dir_all(&logs).map_err(|source| TrainError::Io { path: logs.display().to_string(), source })?;
    }

    let mut done = Vec::new();
    let result = run(train_tiles, val_tiles, cfg, n_channels, out, &mut done);
    if let Some(o) = out {
        write_manifest(o, cfg, n_channels, &done, result.is_ok());
    }
    result
}

fn run(
    train_tiles: &[Tile],
    val_tiles: &[Tile],
    cfg: &PipelineConfig,
    n_channels: usize,
    out: Option<&Path>,
    done: &mut Vec<String>,
) -> Result<EnsembleArtifacts, TrainError> {
    let save_log = |name: &str, log: &TrainLog| -> Result<(), TrainError> {
        match out {
            Some(o) => log.write_jsonl(&o.join("logs").join(format!("{name}.jsonl"))),
            None => Ok(()),
        }
    };

    let trained = train_members(train_tiles, val_tiles, cfg, 0, out)?;
    let mut members = Vec::new();
    let mut logs = Vec::new();
    for (i, (member, log)) in trained.into_iter().enumerate() {
        save_log(&member_name(i), &log)?;
        done.push(member_name(i));
        members.push(member);
        logs.push((member_name(i), log));
    }

    let train_maps = match cfg.stacking {
        Stacking::InSample => member_maps(&members, train_tiles)?,
        Stacking::CrossFit { folds } => cross_fit_maps(train_tiles, val_tiles, cfg, folds)?,
    };
    let val_maps = member_maps(&members, val_tiles)?;
    let m = members.len();

    let stage = |name: &str,
                 mut model: Model,
                 stream: u64,
                 base: &TrainConfig,
                 build: &dyn Fn(&[SegMap], &Tile) -> Result<Sample, TrainError>|
     -> Result<(Model, TrainLog), TrainError> {
        let samples = |maps: &[Vec<SegMap>], tiles: &[Tile]| -> Result<Vec<Sample>, TrainError> {
            maps.iter().zip(tiles).map(|(mm, t)| build(mm, t)).collect()
        };
        let train_set = samples(&train_maps, train_tiles)?;
        let val_set = samples(&val_maps, val_tiles)?;
        model = init_weights(model, derive_seed(cfg.seed, stream));
        let ckpt = out.map(|o| o.join("models").join(name));
        let log = train(&mut model, &train_set, &val_set, &cfg.stage(base, stream + 1), ckpt.as_deref())?;
        save_log(name, &log)?;
        Ok((model, log))
    };

    let (linear, linear_log) = stage(
        "linear",
        build_pointwise(m, true)?,
        100,
        &cfg.linear_train,
        &|maps, t| Ok(Sample { input: stack_maps(maps)?, target: t.target() }),
    )
    .map_err(|e| e.in_stage("train linear combiner"))?;
    done.push("linear".into());
    logs.push(("linear".into(), linear_log));

    let (deep, deep_log) = stage(
        "deep",
        build_unet(&cfg.deep.config(m + n_channels))?,
        200,
        &cfg.deep_train,
        &|maps, t| Ok(Sample { input: stack_inputs(maps, t.channels.view())?, target: t.target() }),
    )
    .map_err(|e| e.in_stage("train deep combiner"))?;
    done.push("deep".into());
    logs.push(("deep".into(), deep_log));

    Ok(EnsembleArtifacts { members, linear, deep, logs, n_channels, vote_threshold: cfg.vote_threshold })
}

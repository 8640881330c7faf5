//! Training loop for base segmenters and combiners.
//!
//! Each epoch visits every (sample, augmentation) pair once in a seeded
//! shuffled order, minimizes the Jaccard loss with Adam, then scores the
//! un-augmented validation samples. The parameters of the best validation
//! epoch are kept (and optionally checkpointed) and restored at the end.

mod pipeline;

pub use pipeline::{
    cross_fit_maps, member_maps, train_pipeline, EnsembleArtifacts, MemberSpec, NetShape, PipelineConfig, Stacking,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionError, Predictor};
use crate::jaccard::{jaccard_image, jaccard_loss_grad, soft_jaccard, JaccardError, SegMap};
use crate::segnet::{save_model, Model, ModelError};
use crate::tilestore::{derive_seed, Dihedral, Tile, TileError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch}, step {step}: non-finite {what}")]
    Diverged { epoch: usize, step: usize, what: &'static str },
    #[error("augmentation needs square samples, got {height}x{width}")]
    NotSquare { height: usize, width: usize },
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Jaccard(#[from] JaccardError),
}

impl TrainError {
    fn in_stage(self, stage: impl Into<String>) -> Self {
        TrainError::Stage { stage: stage.into(), source: Box::new(self) }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub name: String,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { name: "adam".into(), beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 1,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        let o = &self.optimizer;
        if o.name != "adam" {
            return Err(TrainError::InvalidConfig(format!("unknown optimizer {:?}", o.name)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return bad("adam needs betas in [0, 1) and a positive epsilon");
        }
        Ok(())
    }

    /// Variants enumerated per sample and epoch.
    pub fn variants(&self) -> &'static [Dihedral] {
        if self.augment {
            &Dihedral::ALL
        } else {
            &Dihedral::ALL[..1]
        }
    }
}

/// One training example: model input and `{0, 1}` target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Array3<f32>,
    pub target: Array2<f32>,
}

impl Sample {
    /// The tile's selected channels against its mask.
    pub fn from_tile(tile: &Tile, channels: &[usize]) -> Result<Self, TileError> {
        Ok(Sample { input: tile.select_channels(channels)?, target: tile.target() })
    }

    fn variant(&self, d: Dihedral) -> (Array3<f32>, Array2<f32>) {
        (d.apply3(self.input.view()), d.apply2(self.target.view()))
    }
}

/// Adam state over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, cfg: &OptimizerConfig) -> Self {
        Adam {
            lr: lr as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.epsilon as f32,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p -= self.lr * update;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_jaccard: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_jaccard: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub steps_per_epoch: usize,
    pub config: TrainConfig,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }
}

/// Mean soft Jaccard of the model over `samples`.
pub fn validate(model: &Model, samples: &[Sample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("no validation samples"));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = model.predict(s.input.view())?;
        total += soft_jaccard(s.target.view(), pred.view())?;
    }
    Ok(total / samples.len() as f64)
}

/// Mean `jaccard_image` of any predictor over `tiles`.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, tiles: &[Tile]) -> Result<f64, TrainError> {
    if tiles.is_empty() {
        return Err(TrainError::EmptySplit("no tiles to evaluate"));
    }
    let mut total = 0.0;
    for t in tiles {
        let pred = predictor.predict_tile(t)?;
        total += jaccard_image(&SegMap::from_mask(&t.mask), &pred)?;
    }
    Ok(total / tiles.len() as f64)
}

fn check_samples(model: &Model, samples: &[Sample], augment: bool) -> Result<(), TrainError> {
    for s in samples {
        model.check_input(&s.input.view())?;
        let (h, w) = s.target.dim();
        if (s.input.dim().1, s.input.dim().2) != (h, w) {
            return Err(TrainError::InvalidConfig(format!(
                "target {h}x{w} does not match input {:?}",
                s.input.dim()
            )));
        }
        if augment && h != w {
            return Err(TrainError::NotSquare { height: h, width: w });
        }
    }
    Ok(())
}

/// Trains `model` in place and leaves it at the best validation epoch.
///
/// When `checkpoint_dir` is given the best weights are written there every
/// time the validation score improves.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("no training samples"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("no validation samples"));
    }
    check_samples(model, train_set, config.augment)?;
    check_samples(model, val_set, false)?;

    let variants = config.variants();
    let mut order: Vec<(usize, usize)> =
        (0..train_set.len()).flat_map(|i| (0..variants.len()).map(move |a| (i, a))).collect();
    let n = model.params().len();
    let mut adam = Adam::new(n, config.learning_rate, &config.optimizer);
    let mut grads = vec![0.0f32; n];
    let mut best: Option<(usize, f64, Vec<f32>)> = None;
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f32;
            for &(i, a) in batch {
                let (input, target) = train_set[i].variant(variants[a]);
                let (probs, tape) = model.forward_train(input.view())?;
                if probs.iter().any(|p| !p.is_finite()) {
                    return Err(TrainError::Diverged { epoch, step, what: "prediction" });
                }
                let (loss, mut dprobs) = jaccard_loss_grad(target.view(), probs.view())?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch, step, what: "loss" });
                }
                loss_sum += loss;
                dprobs.mapv_inplace(|g| g * scale);
                model.backward_into(tape, &dprobs, &mut grads);
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { epoch, step, what: "gradient" });
            }
            adam.step(model.params_mut(), &grads);
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(TrainError::Diverged { epoch, step: order.len(), what: "weights" });
        }
        let val = validate(model, val_set)?;
        let loss = loss_sum / order.len() as f64;
        if best.as_ref().is_none_or(|b| val > b.1) {
            if let Some(dir) = checkpoint_dir {
                save_model(model, dir)?;
            }
            best = Some((epoch, val, model.params().to_vec()));
        }
        let seconds = started.elapsed().as_secs_f64();
        log::debug!("epoch {epoch}: loss {loss:.5} val_jaccard {val:.5} ({seconds:.1}s)");
        records.push(EpochRecord { epoch, loss, val_jaccard: val, seconds });
    }

    let (best_epoch, best_val, params) = best.expect("at least one epoch");
    model.params_mut().copy_from_slice(&params);
    if config.epochs >= 10 && !(5..=10).contains(&best_epoch) {
        log::info!("best epoch {best_epoch} falls outside the usual 5..=10 window");
    }
    Ok(TrainLog {
        records,
        best_epoch,
        best_val_jaccard: best_val,
        best_checkpoint: checkpoint_dir.map(Path::to_path_buf),
        steps_per_epoch: order.len().div_ceil(config.batch_size),
        config: config.clone(),
    })
}

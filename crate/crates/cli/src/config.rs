//! Run configuration: one JSON document, optionally patched by `key=value`
//! overrides addressed with dotted paths.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use segfuse_core::fusion::FusionKind;
use segfuse_core::overlay::OverlaySpec;
use segfuse_core::scorer::MatchOrder;
use segfuse_core::tilestore::SceneSpec;
use segfuse_core::trainer::{NetShape, PipelineConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    #[default]
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub runs_dir: PathBuf,
    /// Master seed; replaces the scene and pipeline seeds.
    pub seed: u64,
    pub scene: SceneSpec,
    pub n_tiles: usize,
    pub split_ratios: [f64; 3],
    pub pipeline: PipelineConfig,
    pub fusions: Vec<FusionKind>,
    /// Split that `predict`, `score` and `visualize` work on.
    pub eval_split: EvalSplit,
    pub threshold: f32,
    pub min_area: f64,
    pub iou_threshold: f64,
    pub match_order: MatchOrder,
    pub overlay: OverlaySpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetShape { depth: 3, base_width: 4, conv_per_block: 1, ..NetShape::default() };
        let mut pipeline = PipelineConfig { deep: net.clone(), ..PipelineConfig::default() };
        for m in &mut pipeline.members {
            m.net = net.clone();
        }
        RunConfig {
            dataset_dir: "dataset".into(),
            runs_dir: "runs".into(),
            seed: 0,
            scene: SceneSpec::default(),
            n_tiles: 200,
            split_ratios: [0.7, 0.3, 0.0],
            pipeline,
            fusions: FusionKind::ALL.to_vec(),
            eval_split: EvalSplit::Val,
            threshold: 0.5,
            min_area: 0.0,
            iou_threshold: 0.5,
            match_order: MatchOrder::Iou,
            overlay: OverlaySpec::default(),
        }
    }
}

/// Sets `path` (dot separated) inside `doc`. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key.parse().with_context(|| format!("{path}: {key:?} is not an array index"))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| anyhow!("{path}: index {idx} out of range ({len})"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("{path}: {key:?} does not address an object or array"),
        };
    }
    bail!("empty override path")
}

impl RunConfig {
    /// Reads `path` (or the defaults), applies overrides and the seed, and
    /// resolves relative directories against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).context("invalid config")?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.scene.seed = cfg.seed;
        cfg.pipeline.seed = cfg.seed;
        let base = path.and_then(Path::parent).unwrap_or(Path::new(""));
        if cfg.dataset_dir.is_relative() {
            cfg.dataset_dir = base.join(&cfg.dataset_dir);
        }
        if cfg.runs_dir.is_relative() {
            cfg.runs_dir = base.join(&cfg.runs_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.n_tiles < 2 {
            bail!("n_tiles must be at least 2");
        }
        if self.fusions.is_empty() {
            bail!("fusions must name at least one fusion kind");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            bail!("threshold must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.iou_threshold) {
            bail!("iou_threshold must lie in [0, 1)");
        }
        self.pipeline.validate(self.scene.channels)?;
        Ok(())
    }

    /// SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }
}

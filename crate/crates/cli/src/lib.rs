//! Commands behind the `segfuse` binary.
//!
//! Layout on disk:
//!
//! ```text
//! <dataset_dir>/tiles/<id>/...        tile containers
//! <dataset_dir>/split.json            train/val/test ids
//! <dataset_dir>/dataset.json          scene spec and tile count
//! <runs_dir>/models/<name>/           checkpoints (member0.., linear, deep)
//! <runs_dir>/logs/<name>.jsonl        per-epoch training records
//! <runs_dir>/ensemble.json, train.json
//! <runs_dir>/predictions/<fusion>/    <id>.probs.bin, <id>.polygons.json, index.json
//! <runs_dir>/scores/                  <fusion>.json, summary.json, table.txt
//! <runs_dir>/overlays/<fusion>/<id>.ppm
//! <dir>/provenance/<command>.json
//! ```

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use segfuse_core::fusion::{fuse_vote, EnsembleManifest, FusionKind, Predictor};
use segfuse_core::jaccard::{jaccard_image, SegMap};
use segfuse_core::overlay::render_overlay;
use segfuse_core::polygonize::{extract_polygons, PolygonSet};
use segfuse_core::scorer::{score_run, score_table, RunReport, Summary};
use segfuse_core::tilestore::{generate_dataset, load_tile, save_tile, split_dataset, DatasetSplit, SceneSpec, Tile};
use segfuse_core::trainer::train_pipeline;

pub use config::{apply_override, EvalSplit, RunConfig};

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    seed: u64,
    scene_seed: u64,
    pipeline_seed: u64,
    fusions: &'a [FusionKind],
    config: &'a RunConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn provenance(dir: &Path, command: &str, cfg: &RunConfig, fusions: &[FusionKind]) -> Result<()> {
    let record = Provenance {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        scene_seed: cfg.scene.seed,
        pipeline_seed: cfg.pipeline.seed,
        fusions,
        config: cfg,
    };
    write_json(&dir.join("provenance").join(format!("{command}.json")), &record)
}

#[derive(Serialize, Deserialize)]
struct DatasetInfo {
    scene: SceneSpec,
    n_tiles: usize,
    split_ratios: [f64; 3],
}

/// Writes the synthetic dataset and its split.
pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.dataset_dir;
    let tiles = generate_dataset(&cfg.scene, cfg.n_tiles)?;
    for t in &tiles {
        save_tile(t, &dir.join("tiles").join(&t.id))?;
    }
    let ids: Vec<String> = tiles.iter().map(|t| t.id.clone()).collect();
    let split = split_dataset(&ids, cfg.split_ratios, cfg.seed)?;
    write_json(&dir.join("split.json"), &split)?;
    write_json(&dir.join("dataset.json"), &DatasetInfo { scene: cfg.scene.clone(), n_tiles: cfg.n_tiles, split_ratios: cfg.split_ratios })?;
    provenance(dir, "generate", cfg, &[])?;
    log::info!(
        "generated {} tiles in {} (train {}, val {}, test {})",
        tiles.len(),
        dir.display(),
        split.train_ids.len(),
        split.val_ids.len(),
        split.test_ids.len()
    );
    Ok(())
}

fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let path = cfg.dataset_dir.join("split.json");
    if !path.exists() {
        bail!("missing dataset: expected {} (run `segfuse generate` first)", path.display());
    }
    read_json(&path)
}

fn load_tiles(cfg: &RunConfig, ids: &[String]) -> Result<Vec<Tile>> {
    ids.iter().map(|id| Ok(load_tile(&cfg.dataset_dir.join("tiles").join(id))?)).collect()
}

fn eval_ids(cfg: &RunConfig, split: &DatasetSplit) -> Result<Vec<String>> {
    let ids = match cfg.eval_split {
        EvalSplit::Val => &split.val_ids,
        EvalSplit::Test => &split.test_ids,
    };
    if ids.is_empty() {
        bail!("the {:?} split is empty", cfg.eval_split);
    }
    Ok(ids.clone())
}

/// Trains members and combiners on the dataset's train/val split.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let split = load_split(cfg)?;
    let train = load_tiles(cfg, &split.train_ids)?;
    let val = load_tiles(cfg, &split.val_ids)?;
    let out = &cfg.runs_dir;
    write_json(&out.join("train.json"), &cfg.pipeline)?;
    let artifacts = train_pipeline(&train, &val, &cfg.pipeline, Some(out))?;
    for (name, log) in &artifacts.logs {
        log::info!("{name}: best epoch {} (val jaccard {:.4})", log.best_epoch, log.best_val_jaccard);
    }
    provenance(out, "train", cfg, &[])
}

fn predictions_dir(cfg: &RunConfig, kind: FusionKind) -> PathBuf {
    cfg.runs_dir.join("predictions").join(kind.as_str())
}

#[derive(Serialize, Deserialize)]
struct PredictionIndex {
    fusion: FusionKind,
    tiles: Vec<String>,
    height: usize,
    width: usize,
    threshold: f32,
    min_area: f64,
    mean_jaccard: f64,
    /// Vote fusion with an even member count.
    #[serde(default)]
    tie_possible: bool,
}

fn write_map(path: &Path, map: &SegMap) -> Result<()> {
    let bytes: Vec<u8> = map.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Fused probability maps and polygons for the evaluation tiles.
pub fn cmd_predict(cfg: &RunConfig, kinds: &[FusionKind]) -> Result<()> {
    let manifest_path = cfg.runs_dir.join(EnsembleManifest::FILE);
    if !manifest_path.exists() {
        bail!("missing trained ensemble: expected {} (run `segfuse train` first)", manifest_path.display());
    }
    let manifest = EnsembleManifest::load(&cfg.runs_dir)?;
    if !manifest.complete {
        bail!("ensemble in {} is incomplete; rerun `segfuse train`", cfg.runs_dir.display());
    }
    let split = load_split(cfg)?;
    let ids = eval_ids(cfg, &split)?;
    let tiles = load_tiles(cfg, &ids)?;
    let ensembles = kinds
        .iter()
        .map(|&k| Ok((k, manifest.ensemble(&cfg.runs_dir, k)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut jaccard = vec![0.0; kinds.len()];
    let mut ties = false;
    for k in kinds {
        fs::create_dir_all(predictions_dir(cfg, *k))?;
    }
    for tile in &tiles {
        let maps = ensembles[0].1.member_maps(tile)?;
        let truth = SegMap::from_mask(&tile.mask);
        for (i, (kind, ensemble)) in ensembles.iter().enumerate() {
            let dir = predictions_dir(cfg, *kind);
            let fused = ensemble.fuse(&maps, tile)?;
            if *kind == FusionKind::Vote {
                let vote = fuse_vote(&maps, manifest.vote_threshold)?;
                ties = vote.tie_possible;
                write_map(&dir.join(format!("{}.uncertainty.bin", tile.id)), &vote.uncertainty)?;
            }
            jaccard[i] += jaccard_image(&truth, &fused)? / tiles.len() as f64;
            write_map(&dir.join(format!("{}.probs.bin", tile.id)), &fused)?;
            extract_polygons(&fused, cfg.threshold, cfg.min_area).save(&dir.join(format!("{}.polygons.json", tile.id)))?;
        }
    }
    for (i, kind) in kinds.iter().enumerate() {
        let index = PredictionIndex {
            fusion: *kind,
            tiles: ids.clone(),
            height: tiles[0].height(),
            width: tiles[0].width(),
            threshold: cfg.threshold,
            min_area: cfg.min_area,
            mean_jaccard: jaccard[i],
            tie_possible: *kind == FusionKind::Vote && ties,
        };
        write_json(&predictions_dir(cfg, *kind).join("index.json"), &index)?;
        log::info!("{kind}: mean jaccard {:.4} over {} tiles", jaccard[i], ids.len());
    }
    provenance(&cfg.runs_dir, "predict", cfg, kinds)
}

fn load_predictions(cfg: &RunConfig, kind: FusionKind) -> Result<(PredictionIndex, Vec<PolygonSet>)> {
    let dir = predictions_dir(cfg, kind);
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        bail!("missing predictions: expected {} (run `segfuse predict --fusion {kind}`)", index_path.display());
    }
    let index: PredictionIndex = read_json(&index_path)?;
    let sets = index
        .tiles
        .iter()
        .map(|id| Ok(PolygonSet::load(&dir.join(format!("{id}.polygons.json")))?))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, sets))
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    fusion: FusionKind,
    mean_jaccard: f64,
    #[serde(flatten)]
    summary: Summary,
}

/// Building-level scores per fusion kind plus the comparison table.
///
/// Returns the table text.
pub fn cmd_score(cfg: &RunConfig, kinds: &[FusionKind]) -> Result<String> {
    let mut rows = Vec::new();
    let mut table_rows = Vec::new();
    let mut tiles: Option<Vec<Tile>> = None;
    for &kind in kinds {
        let (index, preds) = load_predictions(cfg, kind)?;
        let tiles = match &tiles {
            Some(t) => t,
            None => tiles.insert(load_tiles(cfg, &index.tiles)?),
        };
        if tiles.iter().map(|t| &t.id).ne(index.tiles.iter()) {
            bail!("predictions for {kind} cover different tiles than the other fusions");
        }
        let gts: Vec<PolygonSet> = tiles.iter().map(|t| PolygonSet::from_rings(&t.polygons)).collect();
        let mut report = score_run(&preds, &gts, cfg.iou_threshold, cfg.match_order)?;
        for (r, t) in report.tiles.iter_mut().zip(tiles.iter()) {
            r.tile_id = Some(t.id.clone());
        }
        write_json(&cfg.runs_dir.join("scores").join(format!("{kind}.json")), &report)?;
        table_rows.push((kind.to_string(), report.aggregate.clone()));
        rows.push(ScoreRow { fusion: kind, mean_jaccard: index.mean_jaccard, summary: report.aggregate });
    }
    let table = score_table(&table_rows, FusionKind::Average.as_str());
    write_json(&cfg.runs_dir.join("scores").join("summary.json"), &rows)?;
    fs::write(cfg.runs_dir.join("scores").join("table.txt"), &table)?;
    provenance(&cfg.runs_dir, "score", cfg, kinds)?;
    Ok(table)
}

/// PPM overlays for every scored tile.
pub fn cmd_visualize(cfg: &RunConfig, kinds: &[FusionKind]) -> Result<()> {
    for &kind in kinds {
        let score_path = cfg.runs_dir.join("scores").join(format!("{kind}.json"));
        if !score_path.exists() {
            bail!("missing scores: expected {} (run `segfuse score --fusion {kind}`)", score_path.display());
        }
        let report: RunReport = read_json(&score_path)?;
        let (index, preds) = load_predictions(cfg, kind)?;
        let tiles = load_tiles(cfg, &index.tiles)?;
        let dir = cfg.runs_dir.join("overlays").join(kind.as_str());
        fs::create_dir_all(&dir)?;
        for ((tile, set), tile_report) in tiles.iter().zip(&preds).zip(&report.tiles) {
            let overlay = render_overlay(tile, set, tile_report, &cfg.overlay)?;
            overlay.image.write_ppm(&dir.join(format!("{}.ppm", tile.id)))?;
        }
        log::info!("{kind}: {} overlays in {}", tiles.len(), dir.display());
    }
    provenance(&cfg.runs_dir, "visualize", cfg, kinds)
}

/// Resolves `--fusion` (`all` or one kind) against the config's list.
pub fn fusion_kinds(cfg: &RunConfig, flag: Option<&str>) -> Result<Vec<FusionKind>> {
    match flag {
        None => Ok(cfg.fusions.clone()),
        Some("all") => Ok(FusionKind::ALL.to_vec()),
        Some(s) => Ok(vec![s.parse().map_err(|e: String| anyhow!(e))?]),
    }
}

/// Evaluates one fused predictor directly on tiles, without touching disk.
pub fn mean_jaccard<P: Predictor>(predictor: &P, tiles: &[Tile]) -> Result<f64> {
    Ok(segfuse_core::trainer::evaluate(predictor, tiles)?)
}

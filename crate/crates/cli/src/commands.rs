use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use hsiseg::cube::write_atomic;
use hsiseg::dataset::{prepare_images, prepare_tiled, prepare_unlabeled, PreparedImage};
use hsiseg::eval::{argmax, class_color, render_overlay, write_ppm, MetricsReport};
use hsiseg::pipeline::{evaluate_on, run_experiment, ComparisonReport};
use hsiseg::quality::{compute_quality, filter_high_quality, quality_records, write_quality_report};
use hsiseg::synth::{generate_dataset, load_manifest};
use hsiseg::tiling::{slic_segment_traced, SlicParams, TileMap};
use hsiseg::training::{make_split, train as train_model, DatasetSplit, Model, RunDir};
use hsiseg::{load_cube, Class, Error, LabelMap, Result, SpectralDistance, NUM_CLASSES};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::Global;

const RUN_CONFIG: &str = "run_config.json";

pub struct Context {
    pub cfg: RunConfig,
    pub global: Global,
    /// Keys set with dotted flags.
    pub overridden: Vec<String>,
}

impl Context {
    fn default_out(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.global.run_root.clone(), |p, s| p.join(s))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Domain(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Distance {
    Sam,
    L2,
}

impl From<Distance> for SpectralDistance {
    fn from(d: Distance) -> Self {
        match d {
            Distance::Sam => SpectralDistance::Sam,
            Distance::L2 => SpectralDistance::L2,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory (default: <run-root>/synth-<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of phantoms (overrides `images`).
    #[arg(long)]
    images: Option<usize>,
}

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(n) = a.images {
        cfg.images = n;
    }
    let out = a.out.unwrap_or_else(|| ctx.default_out(&[&format!("synth-{}", cfg.seed)]));
    let ds = generate_dataset(cfg.images, &cfg.synth, cfg.seed)?;
    let manifest = ds.save(&out)?;
    write_json(&out.join(RUN_CONFIG), &cfg)?;
    load_manifest(&manifest)?;
    log::info!("wrote {} phantoms to {}", ds.images.len(), out.display());
    print_json(&serde_json::json!({ "manifest": manifest, "images": ds.images.len() }))
}

#[derive(Args, Debug)]
pub struct TileArgs {
    /// Input cube (HSC1).
    #[arg(long)]
    cube: PathBuf,
    /// Label map; when given, tiles carry their majority label.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Spectral distance; also selects that distance's default compactness.
    #[arg(long, value_enum)]
    distance: Option<Distance>,
    /// Output tile map; statistics go to `<out>.json` (default: <run-root>/tiles/<cube>.tiles).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Tiling parameters with `--distance` applied; an explicit `--tiling.compactness` wins
/// over the distance's default.
fn tiling_params(ctx: &Context, distance: Option<Distance>) -> SlicParams {
    let mut p = ctx.cfg.tiling;
    if let Some(d) = distance {
        let defaults = SlicParams::for_distance(d.into());
        p.distance = defaults.distance;
        if !ctx.overridden.iter().any(|k| k == "tiling.compactness") {
            p.compactness = defaults.compactness;
        }
    }
    p
}

pub fn tile(ctx: &Context, a: TileArgs) -> Result<()> {
    let (cube, clamped) = load_cube(&a.cube)?;
    if clamped > 0 {
        log::warn!("{clamped} cube values clamped to [0, 1]");
    }
    let params = tiling_params(ctx, a.distance);
    let (mut map, trace) = slic_segment_traced(&cube, &params)?;
    if let Some(l) = &a.labels {
        map.assign_labels(&LabelMap::load(l)?)?;
    }
    let out = a.out.unwrap_or_else(|| ctx.default_out(&["tiles", &format!("{}.tiles", stem(&a.cube))]));
    map.save(&out)?;
    TileMap::load(&out)?;
    print_json(&serde_json::json!({
        "tiles": map.len(),
        "mean_tile_size": map.mean_tile_size(),
        "iterations": trace.iterations,
        "out": out,
    }))
}

#[derive(Args, Debug)]
pub struct QualityArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    tiles: PathBuf,
    /// JSON-lines report (default: <run-root>/quality/<cube>.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn quality(ctx: &Context, a: QualityArgs) -> Result<()> {
    let (cube, _) = load_cube(&a.cube)?;
    let map = TileMap::load(&a.tiles)?;
    if map.width != cube.width() || map.height != cube.height() {
        return Err(Error::Domain("tile map and cube sizes differ".into()));
    }
    let qs: Vec<_> = map.tiles.iter().map(|t| compute_quality(&cube, t)).collect();
    let outcome = filter_high_quality(&map.tiles, &qs, &ctx.cfg.filter)?;
    let records = quality_records(&qs, &outcome, &ctx.cfg.weights);
    let mut buf = Vec::new();
    write_quality_report(&mut buf, &records)?;
    let out = a.out.unwrap_or_else(|| ctx.default_out(&["quality", &format!("{}.jsonl", stem(&a.cube))]));
    write_atomic(&out, &buf)?;
    print_json(&serde_json::json!({
        "tiles": records.len(),
        "kept": outcome.kept_count(),
        "thresholds": outcome.thresholds,
        "out": out,
    }))
}

fn load_prepared(cfg: &RunConfig, manifest: &Path) -> Result<Vec<PreparedImage>> {
    let (_, list) = load_manifest(manifest)?;
    prepare_images(list, &cfg.prep())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest written by `synth`.
    #[arg(long)]
    manifest: PathBuf,
    /// Model name: CNN or GNN with suffix g, a or aW.
    #[arg(long, default_value = "GNN_aW")]
    model: String,
    /// Run directory (default: <run-root>/<model>).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let images = load_prepared(cfg, &a.manifest)?;
    let counts: Vec<usize> = images.iter().map(|i| i.len()).collect();
    let split = make_split(&counts, cfg.split, hsiseg::mix_seed(&[cfg.seed, 0x5b]))?;
    let mut tcfg = cfg.experiment().train_config(&a.model)?;
    tcfg.cnn.in_channels = images[0].cube.channels();
    let out = a.out.unwrap_or_else(|| ctx.default_out(&[&a.model]));
    let run = RunDir::new(&out)?;
    write_json(&out.join(RUN_CONFIG), cfg)?;
    let outcome = train_model(&tcfg, &images, &split, Some(&run))?;
    print_json(&serde_json::json!({
        "model": a.model,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
        "checkpoint": run.best(),
    }))
}

/// Run config saved with a run, falling back to the current one.
fn run_config(ctx: &Context, run: &Path) -> Result<RunConfig> {
    let p = run.join(RUN_CONFIG);
    if p.exists() {
        read_json(&p)
    } else {
        Ok(ctx.cfg.clone())
    }
}

fn load_model(run: &Path) -> Result<Model> {
    let best = RunDir::new(run)?.best();
    if !best.exists() {
        return Err(Error::Domain(format!("{} has no best checkpoint", run.display())));
    }
    Model::load(best)
}

#[derive(Serialize, Deserialize)]
struct TilePrediction {
    id: usize,
    class: usize,
    probs: [f32; NUM_CLASSES],
}

#[derive(Serialize, Deserialize)]
struct Predictions {
    cube: PathBuf,
    tiles: PathBuf,
    predictions: Vec<TilePrediction>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Run directory written by `train` or `pipeline`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    /// Existing tile map; tiled with the run's settings when omitted.
    #[arg(long)]
    tiles: Option<PathBuf>,
    /// Output directory for `predictions.json` and the tile map (default: <run>/infer/<cube>).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn infer(ctx: &Context, a: InferArgs) -> Result<()> {
    let cfg = run_config(ctx, &a.run)?;
    let mut model = load_model(&a.run)?;
    let (cube, _) = load_cube(&a.cube)?;
    if cube.channels() != model.config.cnn.in_channels {
        return Err(Error::Domain(format!(
            "cube has {} bands, model expects {}",
            cube.channels(),
            model.config.cnn.in_channels
        )));
    }
    let name = stem(&a.cube);
    let out = a.out.unwrap_or_else(|| a.run.join("infer").join(&name));
    let (img, tiles_path) = match &a.tiles {
        Some(p) => {
            let mut map = TileMap::load(p)?;
            for t in &mut map.tiles {
                t.label.get_or_insert(Class::Background as u8);
            }
            (prepare_tiled(&name, cube, map, &cfg.prep())?, p.clone())
        }
        None => {
            let img = prepare_unlabeled(&name, cube, &cfg.prep())?;
            let p = out.join("tiles.bin");
            img.tiles.save(&p)?;
            (img, p)
        }
    };
    let all: Vec<usize> = (0..img.len()).collect();
    let probs = model.predict(&img, &all)?;
    let predictions: Vec<TilePrediction> = probs
        .into_iter()
        .enumerate()
        .map(|(id, p)| TilePrediction { id, class: argmax(&p), probs: p })
        .collect();
    let mut counts = [0usize; NUM_CLASSES];
    predictions.iter().for_each(|p| counts[p.class] += 1);
    let path = out.join("predictions.json");
    write_json(&path, &Predictions { cube: a.cube, tiles: tiles_path, predictions })?;
    print_json(&serde_json::json!({
        "tiles": img.len(),
        "tumor": counts[Class::Tumor.id()],
        "healthy": counts[Class::Healthy.id()],
        "background": counts[Class::Background.id()],
        "out": path,
    }))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Subset {
    /// Every image in the manifest.
    All,
    /// The test images of the run's split.
    Test,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    images: Vec<&'a str>,
    transitions: usize,
    #[serde(flatten)]
    metrics: MetricsReport,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    subset: Subset,
    /// Metrics file (default: <run>/eval_metrics.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<()> {
    let cfg = run_config(ctx, &a.run)?;
    let mut model = load_model(&a.run)?;
    let images = load_prepared(&cfg, &a.manifest)?;
    let idx: Vec<usize> = match a.subset {
        Subset::All => (0..images.len()).collect(),
        Subset::Test => {
            let split: DatasetSplit = read_json(&a.run.join("split.json"))?;
            if let Some(&i) = split.test.iter().find(|&&i| i >= images.len()) {
                return Err(Error::Domain(format!("split image {i} not in manifest")));
            }
            split.test
        }
    };
    let (metrics, transitions) = evaluate_on(&mut model, &images, &idx)?;
    let report = EvalReport {
        images: idx.iter().map(|&i| images[i].name.as_str()).collect(),
        transitions,
        metrics,
    };
    let out = a.out.unwrap_or_else(|| a.run.join("eval_metrics.json"));
    write_json(&out, &report)?;
    print_json(&serde_json::json!({
        "macro_accuracy": report.metrics.accuracy.avg,
        "macro_f1": report.metrics.f1.avg,
        "auc": report.metrics.auc,
        "out": out,
    }))
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    tiles: PathBuf,
    /// `predictions.json` from `infer`.
    #[arg(long, conflicts_with = "labels")]
    predictions: Option<PathBuf>,
    /// Label map; tiles are colored by their majority label.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output PPM file.
    #[arg(long)]
    out: PathBuf,
}

pub fn render(_ctx: &Context, a: RenderArgs) -> Result<()> {
    let (cube, _) = load_cube(&a.cube)?;
    let mut map = TileMap::load(&a.tiles)?;
    let classes: Vec<usize> = match (&a.predictions, &a.labels) {
        (Some(p), _) => {
            let preds: Predictions = read_json(p)?;
            preds.predictions.iter().map(|t| t.class).collect()
        }
        (None, Some(l)) => {
            map.assign_labels(&LabelMap::load(l)?)?;
            map.tiles.iter().map(|t| t.label.unwrap_or(Class::Background as u8) as usize).collect()
        }
        (None, None) => return Err(Error::Config("render needs --predictions or --labels".into())),
    };
    if let Some(&c) = classes.iter().find(|&&c| c >= NUM_CLASSES) {
        return Err(Error::Domain(format!("class {c} out of range")));
    }
    let rgb = render_overlay(&cube, &map, &classes)?;
    write_ppm(&a.out, cube.width(), cube.height(), &rgb)?;
    let legend: Vec<_> = Class::ALL.iter().map(|c| (c.code(), class_color(c.id()))).collect();
    print_json(&serde_json::json!({ "out": a.out, "legend": legend }))
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// Output directory (default: <run-root>/pipeline-<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated model names (overrides `models`).
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Number of phantoms (overrides `images`).
    #[arg(long)]
    images: Option<usize>,
}

pub fn pipeline(ctx: &Context, a: PipelineArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(m) = a.models {
        cfg.models = m;
    }
    if let Some(n) = a.images {
        cfg.images = n;
    }
    for m in &cfg.models {
        hsiseg::pipeline::parse_model_name(m)?;
    }
    let out = a.out.unwrap_or_else(|| ctx.default_out(&[&format!("pipeline-{}", cfg.seed)]));
    fs::create_dir_all(&out)?;
    write_json(&out.join(RUN_CONFIG), &cfg)?;
    let report: ComparisonReport = run_experiment(&cfg.experiment(), Some(&out))?;
    let table = report.table();
    write_atomic(&out.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

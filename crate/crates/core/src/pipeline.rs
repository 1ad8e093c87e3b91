//! End-to-end experiment: synthesize, prepare, split, train the requested models and
//! evaluate them on the held-out images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube::write_atomic;
use crate::dataset::{prepare_images, PrepConfig, PreparedImage, Regime};
use crate::error::{Error, Result};
use crate::eval::{argmax, evaluate, label_transitions, MetricsReport};
use crate::graph::build_knn_graph;
use crate::synth::{generate_dataset, PhantomSpec};
use crate::training::{make_split, train, DatasetSplit, Model, ModelKind, RunDir, TrainConfig};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub images: usize,
    pub synth: PhantomSpec,
    pub prep: PrepConfig,
    pub split: (f64, f64, f64),
    /// Settings for the CNN models; `model`, `regime` and `seed` are filled per run.
    pub cnn_train: TrainConfig,
    /// Settings for the CNN+GNN models.
    pub gnn_train: TrainConfig,
    /// Model names such as `CNN_g` or `GNN_aW`.
    pub models: Vec<String>,
}

/// Phantoms of the desk-scale experiment: 128x128, 32 bands, fewer planted
/// artifacts than the 256x256 default so their share of tiles is similar.
pub fn desk_phantom() -> PhantomSpec {
    PhantomSpec {
        width: 128,
        height: 128,
        saturated_blobs: 2,
        dark_blobs: 2,
        vessels: 1,
        impostor_blobs: 3,
        ..PhantomSpec::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cnn_train = TrainConfig::new(ModelKind::Cnn, Regime::GoodOnly);
        cnn_train.learning_rate = 0.05;
        cnn_train.epochs = 60;
        let mut gnn_train = TrainConfig::new(ModelKind::CnnGnn, Regime::GoodOnly);
        gnn_train.learning_rate = 0.02;
        gnn_train.epochs = 80;
        gnn_train.patience = 25;
        ExperimentConfig {
            seed: 0,
            images: 12,
            synth: desk_phantom(),
            prep: PrepConfig::default(),
            split: (0.65, 0.165, 0.185),
            cnn_train,
            gnn_train,
            models: ["CNN_g", "CNN_a", "CNN_aW", "GNN_g", "GNN_a", "GNN_aW"]
                .map(String::from)
                .to_vec(),
        }
    }
}

/// Parses `CNN_g`, `GNN_aW`, ... into model family and regime.
pub fn parse_model_name(name: &str) -> Result<(ModelKind, Regime)> {
    let (family, suffix) = name
        .split_once('_')
        .ok_or_else(|| Error::Config(format!("bad model name '{name}'")))?;
    let kind = match family {
        "CNN" => ModelKind::Cnn,
        "GNN" => ModelKind::CnnGnn,
        _ => return Err(Error::Config(format!("bad model family in '{name}'"))),
    };
    Ok((kind, suffix.parse()?))
}

impl ExperimentConfig {
    /// Training configuration of one model, with channels and seed resolved.
    pub fn train_config(&self, name: &str) -> Result<TrainConfig> {
        let (kind, regime) = parse_model_name(name)?;
        let mut cfg = match kind {
            ModelKind::Cnn => self.cnn_train.clone(),
            ModelKind::CnnGnn => self.gnn_train.clone(),
        };
        cfg.model = kind;
        cfg.regime = regime;
        cfg.seed = crate::mix_seed(&[self.seed, 0x7a, cfg.seed]);
        cfg.cnn.in_channels = self.synth.channels;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics: MetricsReport,
    /// Predicted-label changes along the kNN edges of the test images.
    pub transitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub split: DatasetSplit,
    pub models: Vec<ModelReport>,
}

impl ComparisonReport {
    pub fn get(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Plain-text table with one row per model.
    pub fn table(&self) -> String {
        let mut s = String::from(
            "model    | acc H  acc T  acc B  acc Avg | F1 Avg | IoU Avg | AUC   | transitions\n",
        );
        let f = |v: Option<f64>| v.map_or("  -  ".to_string(), |x| format!("{x:.3}"));
        for m in &self.models {
            let r = &m.metrics;
            s.push_str(&format!(
                "{:<8} | {}  {}  {}  {}   | {:.3}  | {:.3}   | {} | {}\n",
                m.name,
                f(r.accuracy.healthy),
                f(r.accuracy.tumor),
                f(r.accuracy.background),
                format!("{:.3}", r.accuracy.avg),
                r.f1.avg,
                r.iou.avg,
                f(r.auc),
                m.transitions
            ));
        }
        s
    }
}

/// Metrics and kNN-edge label transitions over every tile of the `test` images.
pub fn evaluate_on(
    model: &mut Model,
    images: &[PreparedImage],
    test: &[usize],
) -> Result<(MetricsReport, usize)> {
    let (mut truth, mut probs): (Vec<usize>, Vec<[f32; NUM_CLASSES]>) = (Vec::new(), Vec::new());
    let mut transitions = 0;
    for &i in test {
        let img = &images[i];
        let tiles: Vec<usize> = (0..img.len()).collect();
        let p = model.predict(img, &tiles)?;
        let pred: Vec<usize> = p.iter().map(|r| argmax(r)).collect();
        let edges = build_knn_graph(&img.centroids(&tiles), model.config.knn_k)?;
        transitions += label_transitions(&edges, &pred);
        probs.extend(p);
        truth.extend_from_slice(&img.labels);
    }
    Ok((evaluate(&truth, &probs)?, transitions))
}

/// Synthesizes and prepares the dataset, then splits it by image.
pub fn prepare_experiment(cfg: &ExperimentConfig) -> Result<(Vec<PreparedImage>, DatasetSplit)> {
    let ds = generate_dataset(cfg.images, &cfg.synth, cfg.seed)?;
    let list = ds
        .images
        .into_iter()
        .zip(&ds.manifest.images)
        .map(|(p, e)| (e.name.clone(), p.cube, p.labels))
        .collect();
    let images = prepare_images(list, &cfg.prep)?;
    let counts: Vec<usize> = images.iter().map(|i| i.len()).collect();
    let split = make_split(&counts, cfg.split, crate::mix_seed(&[cfg.seed, 0x5b]))?;
    Ok((images, split))
}

/// Trains and evaluates every model in `cfg.models`. With `out`, each model gets a run
/// directory `out/<name>` and the report is written to `out/report.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ComparisonReport> {
    let (images, split) = prepare_experiment(cfg)?;
    run_on(cfg, &images, &split, out)
}

pub fn run_on(
    cfg: &ExperimentConfig,
    images: &[PreparedImage],
    split: &DatasetSplit,
    out: Option<&Path>,
) -> Result<ComparisonReport> {
    let mut models = Vec::with_capacity(cfg.models.len());
    for name in &cfg.models {
        let tcfg = cfg.train_config(name)?;
        let run = out.map(|o| RunDir::new(o.join(name))).transpose()?;
        log::info!("training {name}");
        let mut outcome = train(&tcfg, images, split, run.as_ref())?;
        let (metrics, transitions) = evaluate_on(&mut outcome.model, images, &split.test)?;
        if let Some(run) = &run {
            write_atomic(&run.root.join("metrics.json"), &serde_json::to_vec_pretty(&metrics)?)?;
        }
        models.push(ModelReport {
            name: name.clone(),
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            metrics,
            transitions,
        });
    }
    let report = ComparisonReport {
        seed: cfg.seed,
        split: split.clone(),
        models,
    };
    if let Some(o) = out {
        write_atomic(&o.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}

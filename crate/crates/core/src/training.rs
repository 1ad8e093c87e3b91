//! Training loops for the CNN and the CNN+GNN models, dataset splits, the SGD
//! optimizer, checkpoints and run directories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_params, save_params, ParamStore, Tape, Tensor, Var};
use crate::cnn::{augment_patch, patches_to_batch, AugmentParams, Cnn, CnnConfig};
use crate::cube::write_atomic;
use crate::dataset::{PreparedImage, Regime};
use crate::error::{Error, Result};
use crate::eval::argmax;
use crate::graph::{augment_graph, build_knn_graph, Gat, GatConfig, GraphAugment};
use crate::tiling::Patch;
use crate::{mix_seed, NUM_CLASSES};

pub const CNN_PREFIX: &str = "cnn";
pub const GAT_PREFIX: &str = "gat";
pub const INPUT_MEAN: &str = "input.mean";
pub const INPUT_STD: &str = "input.std";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "cnn")]
    Cnn,
    #[serde(rename = "cnn+gnn")]
    CnnGnn,
}

impl ModelKind {
    /// Report name such as `CNN_g` or `GNN_aW`.
    pub fn model_name(self, regime: Regime) -> String {
        let family = match self {
            ModelKind::Cnn => "CNN",
            ModelKind::CnnGnn => "GNN",
        };
        format!("{family}_{}", regime.suffix())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(ModelKind::Cnn),
            "cnn+gnn" | "gnn" => Ok(ModelKind::CnnGnn),
            _ => Err(Error::Config(format!("unknown model '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub regime: Regime,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Early-stopping patience in epochs on validation macro accuracy.
    pub patience: usize,
    /// Coefficient of the CNN term in the combined objective.
    pub cnn_loss_coef: f64,
    pub knn_k: usize,
    pub cnn: CnnConfig,
    pub gat: GatConfig,
    pub augment: AugmentParams,
    pub graph_augment: GraphAugment,
    /// Standardize each band of tile pixels with training-set statistics before the
    /// CNN; padding stays zero.
    pub standardize_input: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Cnn,
            regime: Regime::GoodOnly,
            epochs: 200,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            patience: 15,
            cnn_loss_coef: 1.0,
            knn_k: 2,
            cnn: CnnConfig::default(),
            gat: GatConfig::default(),
            augment: AugmentParams::default(),
            graph_augment: GraphAugment::default(),
            standardize_input: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for a model family; the CNN+GNN backbone runs without batch norm.
    pub fn new(model: ModelKind, regime: Regime) -> Self {
        let mut cfg = TrainConfig {
            model,
            regime,
            ..Default::default()
        };
        if model == ModelKind::CnnGnn {
            cfg.cnn = cfg.cnn.as_backbone();
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning rate must be > 0 and momentum in [0, 1)".into()));
        }
        if self.cnn_loss_coef < 0.0 {
            return Err(Error::Config("cnn_loss_coef must be nonnegative".into()));
        }
        self.cnn.validate()?;
        if self.model == ModelKind::CnnGnn {
            if self.gat.in_dim != self.cnn.embedding_dim {
                return Err(Error::Config("gat.in_dim must equal cnn.embedding_dim".into()));
            }
            self.gat.validate()?;
        }
        Ok(())
    }

    /// Cosine-decayed learning rate for `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.epochs as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Image-level split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Assigns shuffled images one by one to the split furthest below its tile target.
pub fn make_split(tile_counts: &[usize], fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    if tile_counts.len() < 3 {
        return Err(Error::Config(format!("a split needs at least 3 images, got {}", tile_counts.len())));
    }
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&v| !(v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("impossible split fractions {fractions:?}")));
    }
    let total: usize = tile_counts.iter().sum();
    let mut order: Vec<usize> = (0..tile_counts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut filled = [0f64; 3];
    let mut parts: [Vec<usize>; 3] = Default::default();
    for img in order {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for s in 0..3 {
            if f[s] == 0.0 {
                continue;
            }
            let deficit = f[s] * total as f64 - filled[s];
            if deficit > best_deficit + 1e-9 {
                best = s;
                best_deficit = deficit;
            }
        }
        filled[best] += tile_counts[img] as f64;
        parts[best].push(img);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit { train, val, test })
}

/// SGD with momentum: `v = mu v + g; p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: ParamStore<f32>,
}

impl Sgd {
    pub fn new(store: &ParamStore<f32>, momentum: f64) -> Self {
        let mut velocity = store.clone();
        velocity.iter_mut().for_each(|p| p.value.iter_mut().for_each(|v| *v = 0.0));
        Sgd { momentum, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) {
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for (p, v) in store.iter_mut().zip(self.velocity.iter_mut()) {
            if !p.trainable {
                continue;
            }
            for ((x, vel), &g) in p.value.iter_mut().zip(v.value.iter_mut()).zip(&p.grad) {
                *vel = mu * *vel + g;
                *x -= lr * *vel;
            }
        }
        store.zero_grad();
    }

    pub fn velocity(&self) -> &ParamStore<f32> {
        &self.velocity
    }
}

/// `sum_i w_i CE_i / sum_i w_i`; errors when every weight is zero.
pub fn weighted_cross_entropy(
    tape: &mut Tape<f32>,
    logits: Var,
    labels: &[usize],
    weights: &[f32],
) -> Result<Var> {
    tape.cross_entropy(logits, labels, weights)
}

/// Trained parameters with the handles needed to run them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore<f32>,
    pub cnn: Cnn,
    pub gat: Option<Gat>,
}

/// Forward pass of the CNN+GNN model on one graph.
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub cnn_logits: Var,
    pub embeddings: Var,
    pub gnn_logits: Var,
}

impl Model {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x1417]));
        let mut store = ParamStore::new();
        let cnn = Cnn::init(&config.cnn, CNN_PREFIX, &mut store, &mut rng)?;
        let gat = match config.model {
            ModelKind::Cnn => None,
            ModelKind::CnnGnn => Some(Gat::init(&config.gat, GAT_PREFIX, &mut store, &mut rng)?),
        };
        let c = config.cnn.in_channels;
        store.zeros(INPUT_MEAN, &[c], false)?;
        store.filled(INPUT_STD, &[c], 1.0, false)?;
        Ok(Model {
            config: config.clone(),
            store,
            cnn,
            gat,
        })
    }

    /// Writes `config.json` and the parameter checkpoint into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("config.json"), &serde_json::to_vec_pretty(&self.config)?)?;
        save_params(&self.store, dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: TrainConfig = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        Self::load_with_config(dir, config)
    }

    pub fn load_with_config(dir: impl AsRef<Path>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let store = load_params(dir)?;
        let cnn = Cnn::bind(&config.cnn, CNN_PREFIX, &store)?;
        let gat = match config.model {
            ModelKind::Cnn => None,
            ModelKind::CnnGnn => Some(Gat::bind(&config.gat, GAT_PREFIX, &store)?),
        };
        Ok(Model {
            config,
            store,
            cnn,
            gat,
        })
    }

    fn patches(
        &self,
        img: &PreparedImage,
        tiles: &[usize],
        augment: Option<(u64, &AugmentParams)>,
    ) -> Result<Tensor<f32>> {
        let cfg = &self.config.cnn;
        if img.cube.channels() != cfg.in_channels {
            return Err(Error::Config(format!(
                "{}: {} channels but the model expects {}",
                img.name,
                img.cube.channels(),
                cfg.in_channels
            )));
        }
        let mut buf = Patch::zeros(cfg.patch_size, cfg.in_channels);
        let patches: Vec<Patch> = tiles
            .iter()
            .map(|&t| {
                img.write_patch(t, &mut buf);
                let mut p = match augment {
                    Some((seed, a)) => augment_patch(&buf, mix_seed(&[seed, t as u64]), a),
                    None => buf.clone(),
                };
                self.standardize(&mut p);
                p
            })
            .collect();
        patches_to_batch(&patches)
    }

    /// Fits the per-band input statistics on the pixels of `items` (image, tile).
    pub fn fit_input_stats(&mut self, images: &[PreparedImage], items: &[(usize, usize)]) -> Result<()> {
        let c = self.config.cnn.in_channels;
        let (mut sum, mut sq, mut n) = (vec![0f64; c], vec![0f64; c], 0usize);
        for &(i, t) in items {
            let img = &images[i];
            for &p in &img.tiles.tiles[t].pixels {
                for (b, &v) in img.cube.spectrum(p).iter().enumerate() {
                    sum[b] += v as f64;
                    sq[b] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Domain("no pixels to fit input statistics".into()));
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n as f64;
                ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-3)) as f32
            })
            .collect();
        let id = self.input_id(INPUT_MEAN)?;
        self.store.get_mut(id).value = mean;
        let id = self.input_id(INPUT_STD)?;
        self.store.get_mut(id).value = std;
        Ok(())
    }

    fn input_id(&self, name: &str) -> Result<crate::autodiff::ParamId> {
        self.store
            .id(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks '{name}'")))
    }

    /// Applies the fitted band statistics to every nonzero pixel of `patch`.
    pub fn standardize(&self, patch: &mut Patch) {
        if !self.config.standardize_input {
            return;
        }
        let (Some(m), Some(s)) = (self.store.id(INPUT_MEAN), self.store.id(INPUT_STD)) else {
            return;
        };
        let (mean, std) = (&self.store.get(m).value, &self.store.get(s).value);
        for px in patch.data.chunks_exact_mut(patch.channels) {
            if px.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ((v, m), s) in px.iter_mut().zip(mean).zip(std) {
                *v = (*v - m) / s;
            }
        }
    }

    /// CNN embeddings and logits for `tiles` of `img`, evaluated in batches.
    pub fn cnn_outputs(&mut self, img: &PreparedImage, tiles: &[usize]) -> Result<(Vec<f32>, Vec<f32>)> {
        let (mut emb, mut logits) = (Vec::new(), Vec::new());
        for chunk in tiles.chunks(self.config.batch_size.max(1)) {
            let x = self.patches(img, chunk, None)?;
            let mut tape = Tape::new();
            let xv = tape.input(x, false);
            let out = self.cnn.forward(&mut tape, &mut self.store, xv, false, 0)?;
            emb.extend_from_slice(tape.value(out.embeddings).data());
            logits.extend_from_slice(tape.value(out.logits).data());
        }
        Ok((emb, logits))
    }

    /// Forward pass over the graph on `tiles` of `img`, recorded on `tape`.
    pub fn forward_graph(
        &mut self,
        tape: &mut Tape<f32>,
        img: &PreparedImage,
        tiles: &[usize],
        edges: &[(usize, usize)],
        train: bool,
        seed: u64,
    ) -> Result<GraphForward> {
        let gat = self
            .gat
            .clone()
            .ok_or_else(|| Error::Config("model has no graph network".into()))?;
        let augment = train.then_some((mix_seed(&[seed, 1]), &self.config.augment));
        let x = self.patches(img, tiles, augment)?;
        let xv = tape.input(x, false);
        let out = self
            .cnn
            .forward(tape, &mut self.store, xv, train, mix_seed(&[seed, 2]))?;
        let z = tape.detach(out.embeddings);
        let g = gat.forward(tape, &self.store, z, edges, train, mix_seed(&[seed, 3]))?;
        Ok(GraphForward {
            cnn_logits: out.logits,
            embeddings: out.embeddings,
            gnn_logits: g.logits,
        })
    }

    /// Class probabilities for `tiles` of `img` in eval mode. The graph model builds
    /// its kNN graph over exactly these tiles.
    pub fn predict(&mut self, img: &PreparedImage, tiles: &[usize]) -> Result<Vec<[f32; NUM_CLASSES]>> {
        let logits = match self.config.model {
            ModelKind::Cnn => self.cnn_outputs(img, tiles)?.1,
            ModelKind::CnnGnn => {
                let gat = self.gat.clone().expect("graph model without GAT");
                let (emb, _) = self.cnn_outputs(img, tiles)?;
                let edges = build_knn_graph(&img.centroids(tiles), self.config.knn_k)?;
                let mut tape = Tape::new();
                let z = tape.input(Tensor::new(&[tiles.len(), self.config.cnn.embedding_dim], emb)?, false);
                let out = gat.forward(&mut tape, &self.store, z, &edges, false, 0)?;
                tape.value(out.logits).data().to_vec()
            }
        };
        Ok(softmax_rows(&logits))
    }
}

fn softmax_rows(logits: &[f32]) -> Vec<[f32; NUM_CLASSES]> {
    logits
        .chunks_exact(NUM_CLASSES)
        .map(|r| {
            let m = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = r.iter().map(|&v| (v - m).exp()).collect();
            let s: f32 = e.iter().sum();
            [e[0] / s, e[1] / s, e[2] / s]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss_cnn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss_gnn: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_macro_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunState {
    next_epoch: usize,
    best_epoch: usize,
    best_metric: f64,
    stale: usize,
}

/// Files of one training run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints"))?;
        Ok(RunDir { root })
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("checkpoints").join("best")
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("checkpoints").join("last")
    }

    pub fn history_path(&self) -> PathBuf {
        self.root.join("history.jsonl")
    }

    pub fn read_history(&self) -> Result<Vec<EpochRecord>> {
        let path = self.history_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Validation macro accuracy and loss of `model` on `images`.
fn validate(
    model: &mut Model,
    images: &[PreparedImage],
    val: &[usize],
    regime: Regime,
) -> Result<(Option<f64>, Option<f64>)> {
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    let (mut loss, mut wsum) = (0.0, 0.0);
    for &i in val {
        let img = &images[i];
        let tiles = img.selected(regime);
        if tiles.len() <= model.config.knn_k {
            continue;
        }
        let probs = model.predict(img, &tiles)?;
        for (p, &t) in probs.iter().zip(&tiles) {
            let w = img.loss_weight(regime, t) as f64;
            loss -= w * (p[img.labels[t]].max(1e-12) as f64).ln();
            wsum += w;
            truth.push(img.labels[t]);
            pred.push(argmax(p));
        }
    }
    if truth.is_empty() {
        return Ok((None, None));
    }
    let cm = crate::eval::ConfusionMatrix::from_pairs(NUM_CLASSES, &truth, &pred)?;
    let m = crate::eval::per_class_metrics(&cm)?;
    Ok((Some(m.macro_recall), (wsum > 0.0).then(|| loss / wsum)))
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite training loss in epoch {epoch}")))
    }
}

/// One epoch of minibatch CNN training. Returns the mean batch loss.
fn cnn_epoch(
    model: &mut Model,
    opt: &mut Sgd,
    images: &[PreparedImage],
    items: &[(usize, usize)],
    epoch: usize,
) -> Result<f64> {
    let cfg = model.config.clone();
    let mut order = items.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xe0, epoch as u64])));
    let lr = cfg.lr_at(epoch);
    let (mut total, mut batches) = (0.0, 0usize);
    let mut buf = Patch::zeros(cfg.cnn.patch_size, cfg.cnn.in_channels);
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let weights: Vec<f32> = batch
            .iter()
            .map(|&(i, t)| images[i].loss_weight(cfg.regime, t))
            .collect();
        if weights.iter().all(|&w| w <= 0.0) {
            continue;
        }
        let labels: Vec<usize> = batch.iter().map(|&(i, t)| images[i].labels[t]).collect();
        let patches: Vec<Patch> = batch
            .iter()
            .enumerate()
            .map(|(j, &(i, t))| {
                images[i].write_patch(t, &mut buf);
                let seed = mix_seed(&[cfg.seed, epoch as u64, b as u64, j as u64]);
                let mut p = augment_patch(&buf, seed, &cfg.augment);
                model.standardize(&mut p);
                p
            })
            .collect();
        let x = patches_to_batch::<f32>(&patches)?;
        let mut tape = Tape::new();
        let xv = tape.input(x, false);
        let dseed = mix_seed(&[cfg.seed, 0xd0, epoch as u64, b as u64]);
        let out = model.cnn.forward(&mut tape, &mut model.store, xv, true, dseed)?;
        let loss = weighted_cross_entropy(&mut tape, out.logits, &labels, &weights)?;
        let value = tape.value(loss).item() as f64;
        check_finite(value, epoch)?;
        tape.backward(loss)?.accumulate_into(&mut model.store);
        opt.step(&mut model.store, lr);
        total += value;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// One epoch of CNN+GNN training, one image graph per step. Returns mean
/// (combined, CNN, GNN) losses.
fn graph_epoch(
    model: &mut Model,
    opt: &mut Sgd,
    images: &[PreparedImage],
    train: &[usize],
    epoch: usize,
) -> Result<(f64, f64, f64)> {
    let cfg = model.config.clone();
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x9e, epoch as u64])));
    let lr = cfg.lr_at(epoch);
    let (mut tc, mut tn, mut tg, mut steps) = (0.0, 0.0, 0.0, 0usize);
    for (s, &i) in order.iter().enumerate() {
        let img = &images[i];
        let tiles = img.selected(cfg.regime);
        if tiles.len() <= cfg.knn_k {
            continue;
        }
        let seed = mix_seed(&[cfg.seed, 0x57, epoch as u64, s as u64]);
        let base = crate::graph::TileGraph::new(
            tiles.clone(),
            img.centroids(&tiles),
            tiles.iter().map(|&t| img.labels[t]).collect(),
            tiles.iter().map(|&t| img.loss_weight(cfg.regime, t)).collect(),
            vec![crate::graph::SplitMask::Train; tiles.len()],
            cfg.knn_k,
        )?;
        let aug = GraphAugment {
            k: cfg.knn_k,
            ..cfg.graph_augment.clone()
        };
        let g = augment_graph(&base, img.grid_step, seed, &aug)?;
        if g.weights.iter().all(|&w| w <= 0.0) {
            continue;
        }
        let mut tape = Tape::new();
        let f = model.forward_graph(&mut tape, img, &g.node_ids, &g.edges, true, seed)?;
        let l_cnn = weighted_cross_entropy(&mut tape, f.cnn_logits, &g.labels, &g.weights)?;
        let l_gnn = weighted_cross_entropy(&mut tape, f.gnn_logits, &g.labels, &g.weights)?;
        let scaled = tape.scale(l_cnn, cfg.cnn_loss_coef as f32);
        let l = tape.add(scaled, l_gnn)?;
        let (vc, vg, v) = (
            tape.value(l_cnn).item() as f64,
            tape.value(l_gnn).item() as f64,
            tape.value(l).item() as f64,
        );
        check_finite(v, epoch)?;
        tape.backward(l)?.accumulate_into(&mut model.store);
        opt.step(&mut model.store, lr);
        tc += v;
        tn += vc;
        tg += vg;
        steps += 1;
    }
    let d = steps.max(1) as f64;
    Ok((tc / d, tn / d, tg / d))
}

/// Trains `config.model` on the training images of `split`, early-stopping on the
/// validation macro accuracy. With a run directory, writes `config.json`,
/// `split.json`, `history.jsonl` and `checkpoints/{best,last}`, and resumes from
/// `checkpoints/last` when present.
pub fn train(
    config: &TrainConfig,
    images: &[PreparedImage],
    split: &DatasetSplit,
    run: Option<&RunDir>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let items: Vec<(usize, usize)> = split
        .train
        .iter()
        .flat_map(|&i| images[i].selected(config.regime).into_iter().map(move |t| (i, t)))
        .collect();
    if items.is_empty() {
        return Err(Error::Domain("empty training set after filtering".into()));
    }
    let mut model = Model::init(config)?;
    model.fit_input_stats(images, &items)?;
    let mut opt = Sgd::new(&model.store, config.momentum);
    let mut state = RunState {
        next_epoch: 0,
        best_epoch: 0,
        best_metric: f64::NEG_INFINITY,
        stale: 0,
    };
    let mut history = Vec::new();
    let mut best_store = model.store.clone();

    if let Some(run) = run {
        write_atomic(&run.root.join("config.json"), &serde_json::to_vec_pretty(config)?)?;
        write_atomic(&run.root.join("split.json"), &serde_json::to_vec_pretty(split)?)?;
        let last = run.last();
        if last.join("state.json").exists() {
            state = serde_json::from_slice(&fs::read(last.join("state.json"))?)?;
            crate::autodiff::load_params_into(&mut model.store, &last)?;
            crate::autodiff::load_params_into(&mut opt.velocity, last.join("velocity"))?;
            if run.best().exists() {
                crate::autodiff::load_params_into(&mut best_store, run.best())?;
            }
            history = run.read_history()?;
            history.truncate(state.next_epoch);
            log::info!("resuming at epoch {}", state.next_epoch);
        } else if run.history_path().exists() {
            fs::remove_file(run.history_path())?;
        }
    }

    for epoch in state.next_epoch..config.epochs {
        if state.stale >= config.patience {
            break;
        }
        let (train_loss, lc, lg) = match config.model {
            ModelKind::Cnn => (cnn_epoch(&mut model, &mut opt, images, &items, epoch)?, None, None),
            ModelKind::CnnGnn => {
                let (a, b, c) = graph_epoch(&mut model, &mut opt, images, &split.train, epoch)?;
                (a, Some(b), Some(c))
            }
        };
        let (val_acc, val_loss) = validate(&mut model, images, &split.val, config.regime)?;
        let rec = EpochRecord {
            epoch,
            lr: config.lr_at(epoch),
            train_loss,
            train_loss_cnn: lc,
            train_loss_gnn: lg,
            val_loss,
            val_macro_accuracy: val_acc,
        };
        log::info!("{}", serde_json::to_string(&rec)?);
        // Without validation images the last epoch is kept.
        let metric = val_acc.unwrap_or(epoch as f64);
        let improved = metric > state.best_metric;
        if improved {
            state.best_metric = metric;
            state.best_epoch = epoch;
            state.stale = 0;
            best_store = model.store.clone();
        } else {
            state.stale += 1;
        }
        state.next_epoch = epoch + 1;
        if let Some(run) = run {
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(run.history_path())?;
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            if improved {
                save_params(&best_store, run.best())?;
            }
            save_params(&model.store, run.last())?;
            save_params(&opt.velocity, run.last().join("velocity"))?;
            write_atomic(&run.last().join("state.json"), &serde_json::to_vec_pretty(&state)?)?;
        }
        history.push(rec);
    }
    model.store = best_store;
    if let Some(run) = run {
        write_atomic(&run.best().join("config.json"), &serde_json::to_vec_pretty(config)?)?;
        save_params(&model.store, run.best())?;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: state.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        let s = make_split(&[10; 12], (0.65, 0.165, 0.185), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 2, 2));
        let s = make_split(&[10; 20], (0.65, 0.165, 0.185), 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (13, 3, 4));
        let s = make_split(&[3, 4, 5], (1.0, 0.0, 0.0), 0).unwrap();
        assert_eq!(s.train, vec![0, 1, 2]);
        assert_eq!(
            make_split(&[5; 9], (0.6, 0.2, 0.2), 3).unwrap(),
            make_split(&[5; 9], (0.6, 0.2, 0.2), 3).unwrap()
        );
        assert!(make_split(&[5; 9], (0.6, 0.6, 0.2), 3).is_err());
        assert!(make_split(&[5; 2], (0.6, 0.2, 0.2), 3).is_err());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let counts: Vec<usize> = (0..17).map(|i| 40 + 7 * i).collect();
        let s = make_split(&counts, (0.65, 0.165, 0.185), 11).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn weighted_ce_normalization() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.input(Tensor::new(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.2, 0.1]).unwrap(), false);
        let l = weighted_cross_entropy(&mut tape, logits, &[0, 2], &[1.0, 3.0]).unwrap();
        let ce = |r: &[f32], y: usize| {
            let z: f32 = r.iter().map(|v| v.exp()).sum();
            -(r[y].exp() / z).ln()
        };
        let expect = 0.25 * ce(&[1.0, 0.0, -1.0], 0) + 0.75 * ce(&[0.5, 0.2, 0.1], 2);
        assert!((tape.value(l).item() - expect).abs() < 1e-6);
        assert!(weighted_cross_entropy(&mut tape, logits, &[0, 2], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_schedule() {
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 0.1,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.1);
        assert!((cfg.lr_at(5) - 0.05).abs() < 1e-12);
        assert!(cfg.lr_at(9) < cfg.lr_at(8));
    }

    #[test]
    fn sgd_with_zero_gradient_keeps_parameters() {
        let mut store = ParamStore::<f32>::new();
        store.add("p", &[3], vec![0.1, -2.0, 3.5], true).unwrap();
        let before = store.clone();
        let mut opt = Sgd::new(&store, 0.9);
        opt.step(&mut store, 0.5);
        assert_eq!(store, before);
        let id = store.id("p").unwrap();
        for _ in 0..2 {
            store.get_mut(id).grad = vec![1.0, 1.0, 1.0];
            opt.step(&mut store, 0.5);
        }
        // v1 = 1, v2 = 1.9: total step 0.5 * 2.9.
        assert!((store.get(id).value[0] - (0.1 - 1.45)).abs() < 1e-6);
        assert_eq!(store.get(id).grad, vec![0.0; 3]);
    }

    #[test]
    fn model_names() {
        assert_eq!(ModelKind::Cnn.model_name(Regime::GoodOnly), "CNN_g");
        assert_eq!(ModelKind::CnnGnn.model_name(Regime::AllWeighted), "GNN_aW");
        let v = serde_json::to_value(TrainConfig::new(ModelKind::CnnGnn, Regime::All)).unwrap();
        assert_eq!(v["model"], "cnn+gnn");
        assert_eq!(v["regime"], "all");
        assert_eq!(v["cnn"]["batch_norm"], false);
    }
}

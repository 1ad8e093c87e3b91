//! Tile-level metrics and overlay rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube::{write_atomic, HsiCube};
use crate::error::{Error, Result};
use crate::tiling::TileMap;
use crate::{Class, NUM_CLASSES};

/// Counts with rows = ground truth and columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape("confusion_matrix", "matrix must be square"));
        }
        Ok(ConfusionMatrix {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn from_pairs(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape("confusion_matrix", "truth and prediction lengths differ"));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Domain(format!("class ({truth}, {pred}) out of range")));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-class recall ("accuracy"), F1 and IoU. `None` marks classes absent from both
/// truth and prediction; those are left out of the macro averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub recall: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_iou: f64,
    pub excluded: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len().max(1) as f64
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    if cm.total() == 0 {
        return Err(Error::Domain("empty confusion matrix".into()));
    }
    let c = cm.classes;
    let (mut recall, mut f1, mut iou, mut excluded) = (vec![], vec![], vec![], vec![]);
    for k in 0..c {
        let tp = cm.get(k, k);
        let fn_: u64 = (0..c).filter(|&j| j != k).map(|j| cm.get(k, j)).sum();
        let fp: u64 = (0..c).filter(|&i| i != k).map(|i| cm.get(i, k)).sum();
        if tp + fn_ + fp == 0 {
            log::warn!("class {k} absent from truth and prediction; excluded from macro averages");
            excluded.push(k);
            recall.push(None);
            f1.push(None);
            iou.push(None);
            continue;
        }
        recall.push(Some(ratio(tp, tp + fn_)));
        f1.push(Some(ratio(2 * tp, 2 * tp + fp + fn_)));
        iou.push(Some(ratio(tp, tp + fp + fn_)));
    }
    Ok(ClassMetrics {
        macro_recall: mean_present(&recall),
        macro_f1: mean_present(&f1),
        macro_iou: mean_present(&iou),
        recall,
        f1,
        iou,
        excluded,
    })
}

/// Mann-Whitney AUC: P(score_pos > score_neg) + P(tie) / 2, via sorting with midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc", "scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Domain("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Count, for every positive, negatives strictly below plus half the tied ones (in
    // doubled integer units so the result is exact).
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        let neg = (j - i) as u128 - pos;
        doubled += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// ROC points `(fpr, tpr)` from the highest threshold down.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    roc_auc(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        pts.push((fp / n_neg, tp / n_pos));
        i = j;
    }
    Ok(pts)
}

/// Tumor probability with background removed: `p_T / (p_T + p_H)`.
pub fn tumor_probability(probs: &[f32]) -> f64 {
    let t = probs[Class::Tumor.id()] as f64;
    let h = probs[Class::Healthy.id()] as f64;
    if t + h > 0.0 {
        t / (t + h)
    } else {
        0.5
    }
}

/// One row of the report: a value per class code plus the macro average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    #[serde(rename = "H")]
    pub healthy: Option<f64>,
    #[serde(rename = "T")]
    pub tumor: Option<f64>,
    #[serde(rename = "B")]
    pub background: Option<f64>,
    #[serde(rename = "Avg")]
    pub avg: f64,
}

impl PerClass {
    fn from(values: &[Option<f64>], avg: f64) -> Self {
        PerClass {
            healthy: values[Class::Healthy.id()],
            tumor: values[Class::Tumor.id()],
            background: values[Class::Background.id()],
            avg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: PerClass,
    pub f1: PerClass,
    pub iou: PerClass,
    /// Tumor-vs-healthy AUC; `None` when one of the two classes is missing.
    pub auc: Option<f64>,
    pub tiles: u64,
    pub confusion: ConfusionMatrix,
}

/// Metrics from per-tile truth and class probabilities.
pub fn evaluate(truth: &[usize], probs: &[[f32; NUM_CLASSES]]) -> Result<MetricsReport> {
    if truth.len() != probs.len() {
        return Err(Error::shape("evaluate", "truth and probability counts differ"));
    }
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let cm = ConfusionMatrix::from_pairs(NUM_CLASSES, truth, &pred)?;
    let m = per_class_metrics(&cm)?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (t, p) in truth.iter().zip(probs) {
        if *t == Class::Tumor.id() || *t == Class::Healthy.id() {
            scores.push(tumor_probability(p));
            labels.push(*t == Class::Tumor.id());
        }
    }
    let auc = roc_auc(&scores, &labels).ok();
    Ok(MetricsReport {
        accuracy: PerClass::from(&m.recall, m.macro_recall),
        f1: PerClass::from(&m.f1, m.macro_f1),
        iou: PerClass::from(&m.iou, m.macro_iou),
        auc,
        tiles: cm.total(),
        confusion: cm,
    })
}

pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Number of edges whose endpoints receive different predictions.
pub fn label_transitions(edges: &[(usize, usize)], pred: &[usize]) -> usize {
    edges.iter().filter(|&&(a, b)| pred[a] != pred[b]).count()
}

pub const OVERLAY_ALPHA: f64 = 0.45;

pub fn class_color(class: usize) -> [u8; 3] {
    match class {
        0 => [255, 0, 0],
        1 => [0, 255, 0],
        _ => [0, 0, 255],
    }
}

/// RGB overlay: grayscale luminosity of channel `N / 2`, tinted per tile with the
/// predicted class color.
pub fn render_overlay(cube: &HsiCube, tiles: &TileMap, predictions: &[usize]) -> Result<Vec<u8>> {
    if tiles.width != cube.width() || tiles.height != cube.height() {
        return Err(Error::shape("render_overlay", "tile map and cube sizes differ"));
    }
    if predictions.len() != tiles.len() {
        return Err(Error::Domain(format!(
            "{} predictions for {} tiles",
            predictions.len(),
            tiles.len()
        )));
    }
    let band = cube.band(cube.channels() / 2);
    let max = band.iter().copied().fold(0f32, f32::max).max(1e-6);
    let mut rgb = Vec::with_capacity(band.len() * 3);
    for (p, &v) in band.iter().enumerate() {
        let gray = (v / max) as f64 * 255.0;
        let color = class_color(predictions[tiles.assignment[p] as usize]);
        for ch in color {
            let c = (1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * ch as f64;
            rgb.push(c.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(rgb)
}

/// Binary PPM (P6).
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::shape("encode_ppm", "pixel buffer size mismatch"));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(width, height, rgb)?)
}

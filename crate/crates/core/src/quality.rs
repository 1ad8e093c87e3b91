//! Tile quality metrics, the high-quality tile filter and quality loss weights.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cube::{angle_from, dot, l2_unchecked, norm, HsiCube, MIN_SAM_NORM};
use crate::error::{Error, Result};
use crate::tiling::Tile;

/// Exposure and uniformity proxies of a tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileQuality {
    /// Mean reflectance over all pixels and channels.
    pub intensity: f64,
    /// Mean L2 distance of member spectra to the tile mean spectrum.
    pub l2: f64,
    /// Mean spectral angle of member spectra to the tile mean spectrum (radians).
    pub sam: f64,
    /// Set when the mean spectrum is all zeros, in which case `sam` is reported as 0.
    pub sam_degenerate: bool,
}

/// Computes the quality triple of one tile.
///
/// A zero pixel inside a tile with a non-zero mean contributes an angle of pi/2.
pub fn compute_quality(cube: &HsiCube, tile: &Tile) -> TileQuality {
    let c = cube.channels();
    let n = tile.pixels.len().max(1) as f64;
    let mut mean = vec![0f64; c];
    for &p in &tile.pixels {
        for (m, &v) in mean.iter_mut().zip(cube.spectrum(p)) {
            *m += v as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|&m| (m / n) as f32).collect();
    let mean_f64_sum: f64 = mean.iter().map(|&v| v as f64).sum();
    let intensity = mean_f64_sum / c as f64;
    let mean_norm = norm(&mean);
    let degenerate = mean_norm < MIN_SAM_NORM;
    let mut l2 = 0.0;
    let mut sam = 0.0;
    for &p in &tile.pixels {
        let s = cube.spectrum(p);
        l2 += l2_unchecked(s, &mean);
        if !degenerate {
            let ns = norm(s);
            sam += if ns < MIN_SAM_NORM {
                std::f64::consts::FRAC_PI_2
            } else {
                angle_from(dot(s, &mean), ns, mean_norm)
            };
        }
    }
    TileQuality {
        intensity: intensity.clamp(0.0, 1.0),
        l2: l2 / n,
        sam: sam / n,
        sam_degenerate: degenerate,
    }
}

/// Parameters of the three multiplicative loss-weight factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightConfig {
    /// Up to this intensity the factor rises linearly with `slope_low`.
    pub intensity_low: f64,
    /// From this intensity on the factor falls with `slope_high`.
    pub intensity_high: f64,
    pub slope_low: f64,
    pub slope_high: f64,
    pub l2_base: f64,
    pub sam_base: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            intensity_low: 0.167,
            intensity_high: 0.5,
            slope_low: 6.0,
            slope_high: -2.0,
            l2_base: 0.7,
            sam_base: 0.4,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_low < self.intensity_high) {
            return Err(Error::Config("intensity breakpoints must be ordered".into()));
        }
        for (name, b) in [("l2_base", self.l2_base), ("sam_base", self.sam_base)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        Ok(())
    }

    /// Intensity factor: `6 I` below the low breakpoint, 1 on the plateau,
    /// `1 + slope_high (I - high)` (= `2 - 2 I` by default) from the high breakpoint.
    pub fn intensity_factor(&self, intensity: f64) -> f64 {
        let w = if intensity <= self.intensity_low {
            self.slope_low * intensity
        } else if intensity < self.intensity_high {
            1.0
        } else {
            1.0 + self.slope_high * (intensity - self.intensity_high)
        };
        w.clamp(0.0, 1.0)
    }

    pub fn l2_factor(&self, l2: f64) -> f64 {
        self.l2_base.powf(l2)
    }

    pub fn sam_factor(&self, sam: f64) -> f64 {
        self.sam_base.powf(sam)
    }
}

/// Per-tile loss weight `w_I(I) * w_L2(L2) * w_SAM(SAM)`, clamped to `[0, 1]`.
pub fn loss_weight(q: &TileQuality, cfg: &WeightConfig) -> f64 {
    (cfg.intensity_factor(q.intensity) * cfg.l2_factor(q.l2) * cfg.sam_factor(q.sam))
        .clamp(0.0, 1.0)
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("percentile of an empty set".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Percentile cut levels for the high-quality filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub sam_percentile: f64,
    pub l2_percentile: f64,
    pub intensity_low_percentile: f64,
    pub intensity_high_percentile: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            sam_percentile: 75.0,
            l2_percentile: 75.0,
            intensity_low_percentile: 10.0,
            intensity_high_percentile: 90.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    NonUniformLabel,
    IntensityLow,
    IntensityHigh,
    SamHigh,
    L2High,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::NonUniformLabel => "non-uniform label",
            RejectReason::IntensityLow => "intensity below percentile",
            RejectReason::IntensityHigh => "intensity above percentile",
            RejectReason::SamHigh => "SAM above percentile",
            RejectReason::L2High => "L2 above percentile",
        }
    }
}

/// Resolved thresholds of one filter application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub sam_max: f64,
    pub l2_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<bool>,
    pub reasons: Vec<Vec<RejectReason>>,
    pub thresholds: FilterThresholds,
}

impl FilterOutcome {
    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }
}

/// Keeps tiles whose SAM and L2 uniformity do not exceed their percentile cuts, whose
/// intensity lies between the low and high percentiles, and whose label is uniform.
/// Tiles without a label skip the label cut. Percentiles are taken over `qualities`.
pub fn filter_high_quality(
    tiles: &[Tile],
    qualities: &[TileQuality],
    cfg: &FilterConfig,
) -> Result<FilterOutcome> {
    if qualities.is_empty() {
        return Err(Error::Domain("quality filter on an empty tile set".into()));
    }
    if tiles.len() != qualities.len() {
        return Err(Error::shape(
            "filter_high_quality",
            format!("{} tiles vs {} qualities", tiles.len(), qualities.len()),
        ));
    }
    let col = |f: fn(&TileQuality) -> f64| qualities.iter().map(f).collect::<Vec<_>>();
    let sam = col(|q| q.sam);
    let l2 = col(|q| q.l2);
    let intensity = col(|q| q.intensity);
    let thresholds = FilterThresholds {
        sam_max: percentile(&sam, cfg.sam_percentile)?,
        l2_max: percentile(&l2, cfg.l2_percentile)?,
        intensity_min: percentile(&intensity, cfg.intensity_low_percentile)?,
        intensity_max: percentile(&intensity, cfg.intensity_high_percentile)?,
    };
    let mut kept = Vec::with_capacity(tiles.len());
    let mut reasons = Vec::with_capacity(tiles.len());
    for (tile, q) in tiles.iter().zip(qualities) {
        let mut r = Vec::new();
        if tile.label.is_some() && !tile.is_label_uniform() {
            r.push(RejectReason::NonUniformLabel);
        }
        if q.intensity < thresholds.intensity_min {
            r.push(RejectReason::IntensityLow);
        }
        if q.intensity > thresholds.intensity_max {
            r.push(RejectReason::IntensityHigh);
        }
        if q.sam > thresholds.sam_max {
            r.push(RejectReason::SamHigh);
        }
        if q.l2 > thresholds.l2_max {
            r.push(RejectReason::L2High);
        }
        kept.push(r.is_empty());
        reasons.push(r);
    }
    Ok(FilterOutcome {
        kept,
        reasons,
        thresholds,
    })
}

/// One line of the quality report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub id: usize,
    #[serde(rename = "I")]
    pub intensity: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    #[serde(rename = "SAM")]
    pub sam: f64,
    pub weight: f64,
    pub kept: bool,
    pub reason: Option<String>,
}

pub fn quality_records(
    qualities: &[TileQuality],
    outcome: &FilterOutcome,
    weights: &WeightConfig,
) -> Vec<QualityRecord> {
    qualities
        .iter()
        .enumerate()
        .map(|(id, q)| QualityRecord {
            id,
            intensity: q.intensity,
            l2: q.l2,
            sam: q.sam,
            weight: loss_weight(q, weights),
            kept: outcome.kept[id],
            reason: (!outcome.reasons[id].is_empty()).then(|| {
                outcome.reasons[id]
                    .iter()
                    .map(RejectReason::as_str)
                    .collect::<Vec<_>>()
                    .join("; ")
            }),
        })
        .collect()
}

/// Writes records as JSON lines.
pub fn write_quality_report<W: Write>(mut out: W, records: &[QualityRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(i: f64, l2: f64, sam: f64) -> TileQuality {
        TileQuality {
            intensity: i,
            l2,
            sam,
            sam_degenerate: false,
        }
    }

    fn tile_of(cube: &HsiCube, pixels: Vec<usize>) -> Tile {
        Tile {
            id: 0,
            pixel_count: pixels.len(),
            pixels,
            centroid: (0.0, 0.0),
            mean_spectrum: vec![0.0; cube.channels()],
            label: None,
            label_purity: 0.0,
        }
    }

    fn labeled(purity: f32) -> Tile {
        Tile {
            id: 0,
            pixels: vec![],
            pixel_count: 1,
            centroid: (0.0, 0.0),
            mean_spectrum: vec![],
            label: Some(0),
            label_purity: purity,
        }
    }

    #[test]
    fn identical_pixels() {
        let v = [0.1f32, 0.3, 0.5];
        let data: Vec<f32> = v.iter().copied().cycle().take(12).collect();
        let cube = HsiCube::new(2, 2, vec![1.0, 2.0, 3.0], data).unwrap().0;
        let qual = compute_quality(&cube, &tile_of(&cube, vec![0, 1, 2, 3]));
        assert!((qual.intensity - 0.3).abs() < 1e-7);
        assert!(qual.l2 < 1e-7);
        assert!(qual.sam < 1e-3);
        assert!(!qual.sam_degenerate);
    }

    #[test]
    fn black_tile_is_degenerate() {
        let cube = HsiCube::new(2, 1, vec![1.0, 2.0], vec![0.0; 4]).unwrap().0;
        let qual = compute_quality(&cube, &tile_of(&cube, vec![0, 1]));
        assert_eq!((qual.intensity, qual.l2, qual.sam), (0.0, 0.0, 0.0));
        assert!(qual.sam_degenerate);
    }

    #[test]
    fn two_orthogonal_pixels_hand_oracle() {
        let cube = HsiCube::new(2, 1, vec![1.0, 2.0], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap()
            .0;
        let qual = compute_quality(&cube, &tile_of(&cube, vec![0, 1]));
        // mean = (0.5, 0.5); each pixel is sqrt(0.5) away and pi/4 off-angle.
        assert!((qual.intensity - 0.5).abs() < 1e-12);
        assert!((qual.l2 - 0.5f64.sqrt()).abs() < 1e-7);
        assert!((qual.sam - std::f64::consts::FRAC_PI_4).abs() < 1e-7);
    }

    #[test]
    fn weight_spot_values() {
        let cfg = WeightConfig::default();
        assert_eq!(loss_weight(&q(0.3, 0.0, 0.0), &cfg), 1.0);
        assert!((loss_weight(&q(0.1, 0.0, 0.0), &cfg) - 0.6).abs() < 1e-12);
        assert_eq!(loss_weight(&q(1.0, 0.0, 0.0), &cfg), 0.0);
        assert!((loss_weight(&q(0.3, 1.0, 1.0), &cfg) - 0.28).abs() < 1e-12);
        assert_eq!(cfg.intensity_factor(0.5), 1.0);
    }

    #[test]
    fn weight_config_validation() {
        assert!(WeightConfig::default().validate().is_ok());
        let mut bad = WeightConfig::default();
        bad.intensity_low = 0.6;
        assert!(bad.validate().is_err());
        let mut bad = WeightConfig::default();
        bad.sam_base = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn percentile_linear_interpolation() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        assert!((percentile(&v, 75.0).unwrap() - 74.25).abs() < 1e-12);
        assert!((percentile(&v, 10.0).unwrap() - 9.9).abs() < 1e-12);
        assert_eq!(percentile(&[3.0], 50.0).unwrap(), 3.0);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn identical_qualities_all_kept() {
        let tiles = vec![labeled(1.0); 10];
        let quals = vec![q(0.3, 0.1, 0.05); 10];
        let out = filter_high_quality(&tiles, &quals, &FilterConfig::default()).unwrap();
        assert_eq!(out.kept_count(), 10);
    }

    #[test]
    fn sam_cut_keeps_75_of_100() {
        let tiles = vec![labeled(1.0); 100];
        let quals: Vec<TileQuality> = (0..100).map(|i| q(0.3, 0.1, i as f64 * 0.01)).collect();
        let out = filter_high_quality(&tiles, &quals, &FilterConfig::default()).unwrap();
        assert_eq!(out.kept_count(), 75);
        assert!(out.reasons[99].contains(&RejectReason::SamHigh));
    }

    #[test]
    fn split_label_is_rejected() {
        let mut tiles = vec![labeled(1.0); 5];
        tiles[2] = labeled(0.5);
        let quals = vec![q(0.3, 0.1, 0.05); 5];
        let out = filter_high_quality(&tiles, &quals, &FilterConfig::default()).unwrap();
        assert!(!out.kept[2]);
        assert_eq!(out.reasons[2], vec![RejectReason::NonUniformLabel]);
        let rec = quality_records(&quals, &out, &WeightConfig::default());
        assert_eq!(rec[2].reason.as_deref(), Some("non-uniform label"));
        assert_eq!(rec[0].reason, None);
    }

    #[test]
    fn empty_filter_input_errors() {
        assert!(filter_high_quality(&[], &[], &FilterConfig::default()).is_err());
    }

    #[test]
    fn report_is_json_lines() {
        let tiles = vec![labeled(1.0); 4];
        let quals = vec![q(0.3, 0.1, 0.05); 4];
        let out = filter_high_quality(&tiles, &quals, &FilterConfig::default()).unwrap();
        let rec = quality_records(&quals, &out, &WeightConfig::default());
        let mut buf = Vec::new();
        write_quality_report(&mut buf, &rec).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["id", "I", "L2", "SAM", "weight", "kept", "reason"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }

    proptest! {
        #[test]
        fn weight_bounded_and_monotone(i in 0.0f64..=1.0, l2 in 0.0f64..3.0, sam in 0.0f64..3.0, d in 0.0f64..1.0) {
            let cfg = WeightConfig::default();
            let w = loss_weight(&q(i, l2, sam), &cfg);
            prop_assert!((0.0..=1.0).contains(&w));
            prop_assert!(loss_weight(&q(i, l2 + d, sam), &cfg) <= w);
            prop_assert!(loss_weight(&q(i, l2, sam + d), &cfg) <= w);
        }
    }
}

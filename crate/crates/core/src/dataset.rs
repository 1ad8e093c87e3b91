//! Per-image preprocessing shared by training, evaluation and the CLI:
//! tiling, tile labels, qualities, filter outcome and loss weights.

use serde::{Deserialize, Serialize};

use crate::cube::{HsiCube, LabelMap};
use crate::error::{Error, Result};
use crate::quality::{
    compute_quality, filter_high_quality, loss_weight, FilterConfig, FilterOutcome, TileQuality,
    WeightConfig,
};
use crate::tiling::{slic_segment, write_tile_patch, Patch, SlicParams, TileMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PrepConfig {
    pub tiling: SlicParams,
    pub filter: FilterConfig,
    pub weights: WeightConfig,
}

/// Which tiles enter training and how they are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    GoodOnly,
    All,
    AllWeighted,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::GoodOnly, Regime::All, Regime::AllWeighted];

    /// Model-name suffix: `g`, `a`, `aW`.
    pub fn suffix(self) -> &'static str {
        match self {
            Regime::GoodOnly => "g",
            Regime::All => "a",
            Regime::AllWeighted => "aW",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "good_only" | "g" => Ok(Regime::GoodOnly),
            "all" | "a" => Ok(Regime::All),
            "all_weighted" | "aW" => Ok(Regime::AllWeighted),
            _ => Err(Error::Config(format!("unknown regime '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub name: String,
    pub cube: HsiCube,
    pub tiles: TileMap,
    pub qualities: Vec<TileQuality>,
    pub filter: FilterOutcome,
    /// Quality loss weight per tile.
    pub weights: Vec<f32>,
    /// Majority ground-truth class per tile.
    pub labels: Vec<usize>,
    pub grid_step: f64,
}

impl PreparedImage {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Tiles used for training/validation under `regime`.
    pub fn selected(&self, regime: Regime) -> Vec<usize> {
        (0..self.len())
            .filter(|&t| regime != Regime::GoodOnly || self.filter.kept[t])
            .collect()
    }

    /// Loss weight of tile `t` under `regime`.
    pub fn loss_weight(&self, regime: Regime, t: usize) -> f32 {
        match regime {
            Regime::AllWeighted => self.weights[t],
            _ => 1.0,
        }
    }

    pub fn write_patch(&self, t: usize, patch: &mut Patch) {
        write_tile_patch(&self.cube, &self.tiles.tiles[t], patch);
    }

    pub fn centroids(&self, tiles: &[usize]) -> Vec<(f64, f64)> {
        tiles.iter().map(|&t| self.tiles.tiles[t].centroid).collect()
    }
}

/// Tiles `cube`, assigns labels and computes qualities, filter and weights.
pub fn prepare_image(
    name: &str,
    cube: HsiCube,
    labels: &LabelMap,
    cfg: &PrepConfig,
) -> Result<PreparedImage> {
    cfg.weights.validate()?;
    let mut tiles = slic_segment(&cube, &cfg.tiling)?;
    tiles.assign_labels(labels)?;
    prepare_tiled(name, cube, tiles, cfg)
}

/// As [`prepare_image`] for an already tiled and labeled image.
pub fn prepare_tiled(
    name: &str,
    cube: HsiCube,
    tiles: TileMap,
    cfg: &PrepConfig,
) -> Result<PreparedImage> {
    let qualities: Vec<TileQuality> = tiles.tiles.iter().map(|t| compute_quality(&cube, t)).collect();
    let filter = filter_high_quality(&tiles.tiles, &qualities, &cfg.filter)?;
    let weights = qualities.iter().map(|q| loss_weight(q, &cfg.weights) as f32).collect();
    let labels = tiles
        .tiles
        .iter()
        .map(|t| {
            t.label
                .map(|l| l as usize)
                .ok_or_else(|| Error::Domain(format!("{name}: tile {} has no label", t.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(&l) = labels.iter().find(|&&l| l >= crate::NUM_CLASSES) {
        return Err(Error::Domain(format!("{name}: label {l} out of range")));
    }
    Ok(PreparedImage {
        name: name.to_string(),
        grid_step: cfg.tiling.grid_step(),
        cube,
        tiles,
        qualities,
        filter,
        weights,
        labels,
    })
}

/// Tiles an unlabeled cube for inference. Tile labels are set to background and
/// must not be used for scoring.
pub fn prepare_unlabeled(name: &str, cube: HsiCube, cfg: &PrepConfig) -> Result<PreparedImage> {
    let mut tiles = slic_segment(&cube, &cfg.tiling)?;
    for t in &mut tiles.tiles {
        t.label = Some(crate::Class::Background as u8);
    }
    prepare_tiled(name, cube, tiles, cfg)
}

/// Prepares several images, in parallel when enabled.
pub fn prepare_images(
    images: Vec<(String, HsiCube, LabelMap)>,
    cfg: &PrepConfig,
) -> Result<Vec<PreparedImage>> {
    let slots: Vec<std::sync::Mutex<Option<(String, HsiCube, LabelMap)>>> =
        images.into_iter().map(|i| std::sync::Mutex::new(Some(i))).collect();
    crate::par::map_range(slots.len(), |i| {
        let (name, cube, labels) = slots[i].lock().expect("poisoned").take().expect("taken twice");
        prepare_image(&name, cube, &labels, cfg)
    })
    .into_iter()
    .collect()
}

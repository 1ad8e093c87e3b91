//! Quality-aware hyperspectral tile segmentation.
//!
//! The pipeline tiles a reflectance cube into spectral superpixels, scores each
//! tile's exposure and uniformity, encodes tiles with a small CNN and classifies
//! them either directly or with a graph attention network over the tile
//! neighborhood graph.

pub mod autodiff;
pub mod cnn;
pub mod cube;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
mod par;
pub mod pipeline;
pub mod quality;
pub mod synth;
pub mod tiling;
pub mod training;

pub use cube::{l2_distance, load_cube, sam_distance, save_cube, HsiCube, LabelMap, SpectralDistance, Spectrum};
pub use error::{Error, Result};

/// Number of tissue classes handled by the models.
pub const NUM_CLASSES: usize = 3;

/// Class ids used in label maps and model outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[repr(u8)]
pub enum Class {
    Tumor = 0,
    Healthy = 1,
    Background = 2,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Tumor, Class::Healthy, Class::Background];

    pub fn id(self) -> usize {
        self as usize
    }

    /// Short code used in reports.
    pub fn code(self) -> &'static str {
        match self {
            Class::Tumor => "T",
            Class::Healthy => "H",
            Class::Background => "B",
        }
    }
}

/// Combines seed components into one well-mixed 64-bit seed (splitmix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

//! Browser demo over a synthetic phantom: retile it with SAM or L2 SLIC, color the tiles
//! by their quality loss weight, and plot the three weight factors.

use hsiseg::dataset::{prepare_tiled, PrepConfig, PreparedImage};
use hsiseg::synth::{generate_phantom, PhantomSpec};
use hsiseg::tiling::{slic_segment, SlicParams};
use hsiseg::quality::WeightConfig;
use hsiseg::{SpectralDistance, NUM_CLASSES};
use wasm_bindgen::prelude::*;

const BORDER: [u8; 3] = [255, 221, 0];

#[wasm_bindgen]
pub struct Demo {
    image: PreparedImage,
    /// Ground-truth class per pixel.
    truth: Vec<u8>,
    gray: Vec<u8>,
}

fn err(e: hsiseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Luminosity of the middle band scaled to its maximum.
fn gray_of(image: &PreparedImage) -> Vec<u8> {
    let band = image.cube.band(image.cube.channels() / 2);
    let max = band.iter().copied().fold(1e-6f32, f32::max);
    band.iter().map(|v| (v / max * 255.0).round() as u8).collect()
}

#[wasm_bindgen]
impl Demo {
    /// A `size` x `size` phantom with 16 bands.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize) -> Result<Demo, JsError> {
        let spec = PhantomSpec {
            width: size,
            height: size,
            channels: 16,
            saturated_blobs: 2,
            dark_blobs: 2,
            vessels: 1,
            ..PhantomSpec::default()
        };
        let ph = generate_phantom(&spec, seed).map_err(err)?;
        let mut tiles = slic_segment(&ph.cube, &SlicParams::default()).map_err(err)?;
        tiles.assign_labels(&ph.labels).map_err(err)?;
        let image = prepare_tiled("demo", ph.cube, tiles, &PrepConfig::default()).map_err(err)?;
        Ok(Demo {
            gray: gray_of(&image),
            truth: ph.labels.data,
            image,
        })
    }

    pub fn width(&self) -> usize {
        self.image.cube.width()
    }

    pub fn height(&self) -> usize {
        self.image.cube.height()
    }

    pub fn tile_count(&self) -> usize {
        self.image.len()
    }

    /// Reruns SLIC; `distance` is `"sam"` or `"l2"`. Returns the new tile count.
    pub fn retile(&mut self, distance: &str, compactness: f64, target: usize) -> Result<usize, JsError> {
        let distance: SpectralDistance = distance.parse().map_err(err)?;
        let params = SlicParams {
            compactness,
            target_pixels_per_tile: target.max(4),
            ..SlicParams::for_distance(distance)
        };
        let prep = PrepConfig {
            tiling: params,
            ..PrepConfig::default()
        };
        let mut tiles = slic_segment(&self.image.cube, &params).map_err(err)?;
        let labels = hsiseg::LabelMap {
            width: self.width(),
            height: self.height(),
            data: self.truth.clone(),
        };
        tiles.assign_labels(&labels).map_err(err)?;
        self.image = prepare_tiled("demo", self.image.cube.clone(), tiles, &prep).map_err(err)?;
        Ok(self.image.len())
    }

    /// RGBA image: grayscale band with tile borders, tinted by ground-truth class when `tint`.
    pub fn tiling_rgba(&self, tint: bool) -> Vec<u8> {
        self.paint(|p| {
            let g = self.gray[p] as f64;
            if !tint {
                return [g as u8; 3];
            }
            let c = hsiseg::eval::class_color(self.truth[p] as usize % NUM_CLASSES);
            c.map(|ch| (0.7 * g + 0.3 * ch as f64).round() as u8)
        })
    }

    /// RGBA heatmap of the per-tile loss weight (dark red = 0, bright green = 1);
    /// tiles rejected by the quality filter are hatched.
    pub fn weight_rgba(&self) -> Vec<u8> {
        let w = self.width();
        self.paint(|p| {
            let t = self.image.tiles.assignment[p] as usize;
            let v = self.image.weights[t] as f64;
            let rgb = [(1.0 - v) * 200.0 + 30.0, v * 220.0 + 20.0, 40.0];
            let hatched = !self.image.filter.kept[t] && (p % w + p / w).is_multiple_of(6);
            if hatched {
                [20, 20, 20]
            } else {
                rgb.map(|c| c as u8)
            }
        })
    }

    fn paint(&self, color: impl Fn(usize) -> [u8; 3]) -> Vec<u8> {
        let (w, h) = (self.width(), self.height());
        let a = &self.image.tiles.assignment;
        let mut out = Vec::with_capacity(w * h * 4);
        for p in 0..w * h {
            let (x, y) = (p % w, p / w);
            let border = (x + 1 < w && a[p + 1] != a[p]) || (y + 1 < h && a[p + w] != a[p]);
            let rgb = if border { BORDER } else { color(p) };
            out.extend_from_slice(&rgb);
            out.push(255);
        }
        out
    }

    /// JSON with the quality record of the tile under pixel (x, y).
    pub fn tile_info(&self, x: usize, y: usize) -> String {
        if x >= self.width() || y >= self.height() {
            return "null".into();
        }
        let t = self.image.tiles.assignment[y * self.width() + x] as usize;
        let tile = &self.image.tiles.tiles[t];
        let q = &self.image.qualities[t];
        serde_json::json!({
            "id": t,
            "pixels": tile.pixel_count,
            "label": tile.label,
            "purity": tile.label_purity,
            "I": q.intensity,
            "L2": q.l2,
            "SAM": q.sam,
            "weight": self.image.weights[t],
            "kept": self.image.filter.kept[t],
            "reasons": self.image.filter.reasons[t].iter().map(|r| r.as_str()).collect::<Vec<_>>(),
        })
        .to_string()
    }
}

/// `n` samples of a weight factor over its plotting range; `kind` is `"I"`, `"L2"` or `"SAM"`.
/// Returns interleaved `[x0, y0, x1, y1, ...]`.
#[wasm_bindgen]
pub fn weight_curve(kind: &str, n: usize) -> Result<Vec<f64>, JsError> {
    let cfg = WeightConfig::default();
    let (hi, f): (f64, Box<dyn Fn(f64) -> f64>) = match kind {
        "I" => (1.0, Box::new(|v| cfg.intensity_factor(v))),
        "L2" => (3.0, Box::new(|v| cfg.l2_factor(v))),
        "SAM" => (std::f64::consts::FRAC_PI_2, Box::new(|v| cfg.sam_factor(v))),
        _ => return Err(JsError::new(&format!("unknown factor '{kind}'"))),
    };
    let n = n.max(2);
    Ok((0..n)
        .flat_map(|i| {
            let x = hi * i as f64 / (n - 1) as f64;
            [x, f(x)]
        })
        .collect())
}

//! Synthetic labeled hyperspectral phantoms.
//!
//! A phantom is an elliptical tissue region (tumor and healthy areas separated by a
//! smooth random field) on a background margin. Every class has a smooth endmember
//! spectrum; pixels get illumination, noise and optional planted degradations.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::{save_cube, write_atomic, HsiCube, LabelMap};
use crate::error::{Error, Result};
use crate::{Class, NUM_CLASSES};

/// Degradation kinds stored in the per-pixel mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Degradation {
    None = 0,
    Saturated = 1,
    Dark = 2,
    Vessel = 3,
    /// Tissue that looks like the other tissue class but keeps the surrounding label.
    Impostor = 4,
}

impl Degradation {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Degradation::None,
            1 => Degradation::Saturated,
            2 => Degradation::Dark,
            3 => Degradation::Vessel,
            4 => Degradation::Impostor,
            _ => return None,
        })
    }

    /// True for kinds that should look low quality.
    pub fn is_low_quality(self) -> bool {
        matches!(self, Degradation::Saturated | Degradation::Dark | Degradation::Vessel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub wavelength_range: (f32, f32),
    pub noise_sigma: f64,
    /// Amplitude of the smooth multiplicative illumination field.
    pub illumination: f64,
    /// Tissue ellipse semi-axes as fractions of the image size.
    pub tissue_radius: (f64, f64),
    pub field_bumps: usize,
    pub saturated_blobs: usize,
    pub dark_blobs: usize,
    pub vessels: usize,
    pub impostor_blobs: usize,
    pub blob_radius: (f64, f64),
    pub impostor_radius: (f64, f64),
    pub vessel_width: f64,
    pub vessel_sigma: f64,
    pub min_endmember_sam: f64,
    /// Upper bound on the SAM between an image's endmember and the shared one.
    pub patient_shift: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            width: 256,
            height: 256,
            channels: 32,
            wavelength_range: (468.0, 790.0),
            noise_sigma: 0.01,
            illumination: 0.1,
            tissue_radius: (0.36, 0.44),
            field_bumps: 6,
            saturated_blobs: 3,
            dark_blobs: 3,
            vessels: 2,
            impostor_blobs: 6,
            blob_radius: (5.0, 8.0),
            impostor_radius: (4.0, 6.0),
            vessel_width: 3.0,
            vessel_sigma: 0.12,
            min_endmember_sam: 0.15,
            patient_shift: 0.025,
        }
    }
}

impl PhantomSpec {
    /// Clean phantom: no noise, illumination, degradations or per-image shift.
    pub fn clean(width: usize, height: usize, channels: usize) -> Self {
        PhantomSpec {
            width,
            height,
            channels,
            noise_sigma: 0.0,
            illumination: 0.0,
            saturated_blobs: 0,
            dark_blobs: 0,
            vessels: 0,
            impostor_blobs: 0,
            patient_shift: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 || self.channels < 2 {
            return Err(Error::Config("phantoms need at least 8x8 pixels and 2 channels".into()));
        }
        if !(self.wavelength_range.0 < self.wavelength_range.1) {
            return Err(Error::Config("wavelength range must be increasing".into()));
        }
        if self.noise_sigma < 0.0 || self.vessel_sigma < 0.0 || self.illumination < 0.0 {
            return Err(Error::Config("noise and illumination must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Endmember spectra indexed by class id.
pub type Endmembers = Vec<Vec<f32>>;

#[derive(Debug, Clone)]
pub struct Phantom {
    pub cube: HsiCube,
    pub labels: LabelMap,
    /// Per-pixel [`Degradation`] codes.
    pub degradation: Vec<u8>,
    /// Endmembers used for this image (after the per-image shift).
    pub endmembers: Endmembers,
}

fn smooth_curve(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let base = rng.gen_range(0.12..0.28);
    let bumps = rng.gen_range(2..=3);
    let params: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.gen_range(0.12..0.35),
                rng.gen_range(-0.1..1.1),
                rng.gen_range(0.08..0.3),
            )
        })
        .collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let v: f64 = base
                + params
                    .iter()
                    .map(|&(a, c, w)| a * (-(t - c).powi(2) / (2.0 * w * w)).exp())
                    .sum::<f64>();
            v.clamp(0.02, 0.95) as f32
        })
        .collect()
}

fn sam(a: &[f32], b: &[f32]) -> f64 {
    crate::cube::sam_distance(a, b).unwrap_or(std::f64::consts::FRAC_PI_2)
}

fn min_pairwise_sam(e: &Endmembers) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            m = m.min(sam(&e[i], &e[j]));
        }
    }
    m
}

/// Draws class endmembers with pairwise SAM at least `spec.min_endmember_sam`.
pub fn draw_endmembers(spec: &PhantomSpec, seed: u64) -> Result<Endmembers> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x656e_646d_656d);
    for _ in 0..100 {
        let e: Endmembers = (0..NUM_CLASSES).map(|_| smooth_curve(&mut rng, spec.channels)).collect();
        if min_pairwise_sam(&e) >= spec.min_endmember_sam {
            return Ok(e);
        }
    }
    Err(Error::Config(format!(
        "no endmember set with pairwise SAM >= {} after 100 draws",
        spec.min_endmember_sam
    )))
}

/// Smooth multiplicative perturbation whose SAM to the input is at most `max_sam`.
fn shift_endmember(rng: &mut ChaCha8Rng, e: &[f32], max_sam: f64) -> Vec<f32> {
    if max_sam <= 0.0 {
        return e.to_vec();
    }
    let n = e.len();
    let freq = rng.gen_range(0.5..1.5);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let gain = rng.gen_range(0.9..1.1);
    let mut amp = 0.2;
    loop {
        let out: Vec<f32> = e
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let t = i as f64 / (n - 1) as f64;
                let m = 1.0 + amp * (std::f64::consts::TAU * freq * t + phase).sin();
                (v as f64 * m * gain).clamp(0.0, 1.0) as f32
            })
            .collect();
        if sam(&out, e) <= max_sam {
            return out;
        }
        amp *= 0.5;
    }
}

fn disk(w: usize, h: usize, cx: f64, cy: f64, r: f64, mut f: impl FnMut(usize)) {
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w - 1));
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                f(y * w + x);
            }
        }
    }
}

/// Generates one phantom with endmembers drawn from `seed`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    let base = draw_endmembers(spec, seed)?;
    render_phantom(spec, &base, seed)
}

/// Renders a phantom around shared `base` endmembers, applying the per-image shift.
pub fn render_phantom(spec: &PhantomSpec, base: &Endmembers, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    if base.len() != NUM_CLASSES || base.iter().any(|e| e.len() != spec.channels) {
        return Err(Error::shape("render_phantom", "endmember count or length mismatch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h, c) = (spec.width, spec.height, spec.channels);
    let endmembers: Endmembers = base
        .iter()
        .map(|e| shift_endmember(&mut rng, e, spec.patient_shift))
        .collect();

    // Layout.
    let (wf, hf) = (w as f64, h as f64);
    let (cx, cy) = (
        wf / 2.0 + rng.gen_range(-0.05..0.05) * wf,
        hf / 2.0 + rng.gen_range(-0.05..0.05) * hf,
    );
    let (rlo, rhi) = spec.tissue_radius;
    let (ax, ay) = (rng.gen_range(rlo..=rhi) * wf, rng.gen_range(rlo..=rhi) * hf);
    let harmonics: Vec<(f64, f64, f64)> = (2..=4)
        .map(|k| (k as f64, rng.gen_range(0.0..0.08), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let bumps: Vec<(f64, f64, f64, f64)> = (0..spec.field_bumps.max(1))
        .map(|_| {
            (
                cx + rng.gen_range(-1.0..1.0) * ax,
                cy + rng.gen_range(-1.0..1.0) * ay,
                rng.gen_range(0.1..0.25) * wf.min(hf),
                if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            )
        })
        .collect();
    let mut field = vec![f64::NAN; w * h];
    let mut tissue_vals = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = ((x as f64 - cx) / ax, (y as f64 - cy) / ay);
            let theta = dy.atan2(dx);
            let r: f64 = 1.0
                + harmonics
                    .iter()
                    .map(|&(k, a, p)| a * (k * theta + p).sin())
                    .sum::<f64>();
            if dx * dx + dy * dy <= r * r {
                let f: f64 = bumps
                    .iter()
                    .map(|&(bx, by, s, a)| {
                        a * (-((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (2.0 * s * s)).exp()
                    })
                    .sum();
                field[y * w + x] = f;
                tissue_vals.push(f);
            }
        }
    }
    let q = rng.gen_range(0.35..0.65);
    let threshold = if tissue_vals.is_empty() {
        0.0
    } else {
        crate::quality::percentile(&tissue_vals, q * 100.0)?
    };
    let mut labels = vec![Class::Background.id() as u8; w * h];
    for (i, &f) in field.iter().enumerate() {
        if !f.is_nan() {
            labels[i] = if f > threshold { Class::Tumor } else { Class::Healthy }.id() as u8;
        }
    }
    let is_tissue = |i: usize, labels: &[u8]| labels[i] != Class::Background.id() as u8;

    // Appearance class per pixel (impostors swap tumor/healthy).
    let mut appearance = labels.clone();
    let mut degradation = vec![Degradation::None as u8; w * h];
    let tissue_idx: Vec<usize> = (0..w * h).filter(|&i| is_tissue(i, &labels)).collect();
    let pick_center = |rng: &mut ChaCha8Rng| -> Option<(f64, f64)> {
        if tissue_idx.is_empty() {
            return None;
        }
        let p = tissue_idx[rng.gen_range(0..tissue_idx.len())];
        Some(((p % w) as f64, (p / w) as f64))
    };
    for _ in 0..spec.impostor_blobs {
        let Some((bx, by)) = pick_center(&mut rng) else { break };
        let r = rng.gen_range(spec.impostor_radius.0..=spec.impostor_radius.1);
        let own = labels[by as usize * w + bx as usize];
        let other = if own == Class::Tumor.id() as u8 { Class::Healthy } else { Class::Tumor }.id() as u8;
        disk(w, h, bx, by, r, |i| {
            if labels[i] == own {
                appearance[i] = other;
                degradation[i] = Degradation::Impostor as u8;
            }
        });
    }

    // Illumination field.
    let (fx, fy, px, py) = (
        rng.gen_range(0.5..1.5),
        rng.gen_range(0.5..1.5),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = vec![0f32; w * h * c];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let illum = if spec.illumination > 0.0 {
                1.0 + spec.illumination
                    * (std::f64::consts::TAU * fx * x as f64 / wf + px).sin()
                    * (std::f64::consts::TAU * fy * y as f64 / hf + py).cos()
            } else {
                1.0
            };
            let e = &endmembers[appearance[i] as usize];
            let out = &mut data[i * c..(i + 1) * c];
            for (o, &v) in out.iter_mut().zip(e) {
                let mut val = v as f64 * illum;
                if spec.noise_sigma > 0.0 {
                    val += noise.sample(&mut rng);
                }
                *o = val.clamp(0.0, 1.0) as f32;
            }
        }
    }

    // Low-quality regions.
    let blood: Vec<f32> = (0..c)
        .map(|b| {
            let t = b as f64 / (c - 1) as f64;
            (0.05 + 0.25 / (1.0 + (-(t - 0.6) * 14.0).exp())) as f32
        })
        .collect();
    for _ in 0..spec.saturated_blobs {
        let Some((bx, by)) = pick_center(&mut rng) else { break };
        let r = rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1);
        disk(w, h, bx, by, r, |i| {
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 1.0);
            degradation[i] = Degradation::Saturated as u8;
        });
    }
    for _ in 0..spec.dark_blobs {
        let Some((bx, by)) = pick_center(&mut rng) else { break };
        let r = rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1);
        disk(w, h, bx, by, r, |i| {
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= 0.03);
            degradation[i] = Degradation::Dark as u8;
        });
    }
    let vessel_noise =
        Normal::new(0.0, spec.vessel_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..spec.vessels {
        // A sinusoidal band through the tissue, horizontal or vertical.
        let horizontal = rng.gen_bool(0.5);
        let (len, across) = if horizontal { (w, hf) } else { (h, wf) };
        let center = if horizontal { cy } else { cx };
        let off = center + rng.gen_range(-0.5..0.5) * if horizontal { ay } else { ax };
        let amp = rng.gen_range(0.02..0.08) * across;
        let freq = rng.gen_range(0.5..2.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let half = spec.vessel_width / 2.0;
        for t in 0..len {
            let mid = off + amp * (std::f64::consts::TAU * freq * t as f64 / len as f64 + phase).sin();
            let lo = (mid - half).round().max(0.0) as usize;
            let hi = ((mid + half).round() as usize).min(across as usize - 1);
            for s in lo..=hi {
                let i = if horizontal { s * w + t } else { t * w + s };
                if !is_tissue(i, &labels) {
                    continue;
                }
                for (o, &b) in data[i * c..(i + 1) * c].iter_mut().zip(&blood) {
                    *o = (b as f64 + vessel_noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                }
                degradation[i] = Degradation::Vessel as u8;
            }
        }
    }

    let wavelengths = HsiCube::linear_wavelengths(c, spec.wavelength_range.0, spec.wavelength_range.1);
    let (cube, _) = HsiCube::new(w, h, wavelengths, data)?;
    Ok(Phantom {
        cube,
        labels: LabelMap {
            width: w,
            height: h,
            data: labels,
        },
        degradation,
        endmembers,
    })
}

/// Nearest endmember by SAM (class id).
pub fn nearest_endmember(spectrum: &[f32], endmembers: &Endmembers) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, e) in endmembers.iter().enumerate() {
        let d = sam(spectrum, e);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestImage {
    pub name: String,
    pub seed: u64,
    pub cube: String,
    pub labels: String,
    pub degradation: String,
    /// SAM between this image's endmembers and the shared ones, per class.
    pub endmember_shift: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub spec: PhantomSpec,
    pub min_endmember_sam: f64,
    pub images: Vec<ManifestImage>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub base_endmembers: Endmembers,
    pub images: Vec<Phantom>,
    pub manifest: Manifest,
}

/// Per-image seed derived from the dataset seed.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    crate::mix_seed(&[seed, 0x5eed_1a6e, index as u64])
}

/// `n` phantoms sharing endmembers, each with its own layout and spectral shift.
pub fn generate_dataset(n: usize, spec: &PhantomSpec, seed: u64) -> Result<SynthDataset> {
    if n < 3 {
        return Err(Error::Config(format!("a dataset needs at least 3 images, got {n}")));
    }
    let base = draw_endmembers(spec, seed)?;
    let seeds: Vec<u64> = (0..n).map(|i| image_seed(seed, i)).collect();
    let images = crate::par::map_range(n, |i| render_phantom(spec, &base, seeds[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let entries = images
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let name = format!("img_{i:03}");
            ManifestImage {
                cube: format!("{name}.hsc"),
                labels: format!("{name}.labels"),
                degradation: format!("{name}.deg"),
                name,
                seed: seeds[i],
                endmember_shift: p.endmembers.iter().zip(&base).map(|(a, b)| sam(a, b)).collect(),
            }
        })
        .collect();
    Ok(SynthDataset {
        manifest: Manifest {
            seed,
            spec: spec.clone(),
            min_endmember_sam: min_pairwise_sam(&base),
            images: entries,
        },
        base_endmembers: base,
        images,
    })
}

impl SynthDataset {
    /// Writes cubes, label maps, degradation masks and `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (img, entry) in self.images.iter().zip(&self.manifest.images) {
            save_cube(&img.cube, dir.join(&entry.cube))?;
            img.labels.save(dir.join(&entry.labels))?;
            LabelMap {
                width: img.labels.width,
                height: img.labels.height,
                data: img.degradation.clone(),
            }
            .save(dir.join(&entry.degradation))?;
        }
        let path = dir.join("manifest.json");
        write_atomic(&path, &serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(path)
    }
}

/// Reads a manifest and loads its images (cube, labels) relative to the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Manifest, Vec<(String, HsiCube, LabelMap)>)> {
    let path = path.as_ref();
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.images.len());
    for e in &manifest.images {
        let (cube, _) = crate::cube::load_cube(dir.join(&e.cube))?;
        let labels = LabelMap::load(dir.join(&e.labels))?;
        if labels.width != cube.width() || labels.height != cube.height() {
            return Err(Error::Domain(format!("{}: label map size differs from cube", e.name)));
        }
        out.push((e.name.clone(), cube, labels));
    }
    Ok((manifest, out))
}

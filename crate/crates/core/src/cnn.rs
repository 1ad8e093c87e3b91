//! Tile encoder/classifier: 1x1 spectral compression, four conv blocks, global
//! average pooling to a 48-dim embedding and a linear classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormOpts, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tiling::Patch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub compressed_channels: usize,
    pub base_features: usize,
    pub kernels: [usize; 4],
    pub strides: [usize; 4],
    pub paddings: [usize; 4],
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub head_dropout: f64,
    pub batch_norm: bool,
    pub leaky_slope: f64,
    pub patch_size: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            in_channels: 109,
            compressed_channels: 12,
            base_features: 12,
            kernels: [3, 4, 4, 4],
            strides: [1, 2, 2, 2],
            paddings: [1, 1, 1, 1],
            embedding_dim: 48,
            num_classes: crate::NUM_CLASSES,
            head_dropout: 0.5,
            batch_norm: true,
            leaky_slope: 0.01,
            patch_size: 48,
        }
    }
}

impl CnnConfig {
    /// Configuration used when the CNN feeds the graph network: no batch norm,
    /// lighter head dropout.
    pub fn as_backbone(mut self) -> Self {
        self.batch_norm = false;
        self.head_dropout = 0.3;
        self
    }

    /// Output features of the four blocks: `(Nf/2, Nf, 2Nf, 4Nf)`.
    pub fn block_features(&self) -> [usize; 4] {
        let nf = self.base_features;
        [nf / 2, nf, 2 * nf, 4 * nf]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 || self.compressed_channels < 1 || self.base_features < 2 {
            return Err(Error::Config("CNN channel counts must be positive".into()));
        }
        if self.block_features()[3] != self.embedding_dim {
            return Err(Error::Config(format!(
                "embedding_dim {} must equal 4 * base_features = {}",
                self.embedding_dim,
                self.block_features()[3]
            )));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config("head_dropout must lie in [0, 1)".into()));
        }
        let mut s = self.patch_size;
        for i in 0..4 {
            if s + 2 * self.paddings[i] < self.kernels[i] || self.strides[i] == 0 {
                return Err(Error::Config(format!("block {i} does not fit a {s}px input")));
            }
            s = (s + 2 * self.paddings[i] - self.kernels[i]) / self.strides[i] + 1;
        }
        Ok(())
    }

    /// Spatial size after each block.
    pub fn spatial_trace(&self) -> [usize; 4] {
        let mut s = self.patch_size;
        let mut out = [0; 4];
        for i in 0..4 {
            s = (s + 2 * self.paddings[i] - self.kernels[i]) / self.strides[i] + 1;
            out[i] = s;
        }
        out
    }
}

#[derive(Debug, Clone)]
struct BatchNormIds {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    w: ParamId,
    b: ParamId,
    bn: Option<BatchNormIds>,
    stride: usize,
    pad: usize,
}

/// Parameter handles of a CNN stored under `<prefix>.*` names.
#[derive(Debug, Clone)]
pub struct Cnn {
    cfg: CnnConfig,
    compress_w: ParamId,
    compress_b: ParamId,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct CnnOutput {
    /// `[B, embedding_dim]` pooled features.
    pub embeddings: Var,
    /// `[B, num_classes]`.
    pub logits: Var,
    /// Shapes after compression and after each block.
    pub trace: Vec<Vec<usize>>,
}

fn name(prefix: &str, s: &str) -> String {
    format!("{prefix}.{s}")
}

fn lookup<T: Scalar>(store: &ParamStore<T>, n: &str) -> Result<ParamId> {
    store
        .id(n)
        .ok_or_else(|| Error::Config(format!("missing parameter '{n}'")))
}

impl Cnn {
    /// Creates parameters with Kaiming fan-in initialization and zero biases.
    pub fn init<T: Scalar, R: Rng>(
        cfg: &CnnConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (cin, cc) = (cfg.in_channels, cfg.compressed_channels);
        let compress_w = store.kaiming(&name(prefix, "compress.w"), &[cc, cin, 1, 1], cin, 1.0, rng)?;
        let compress_b = store.zeros(&name(prefix, "compress.b"), &[cc], true)?;
        let gain = 2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope);
        let mut blocks = Vec::with_capacity(4);
        let mut prev = cc;
        for (i, &out) in cfg.block_features().iter().enumerate() {
            let k = cfg.kernels[i];
            let p = |s: &str| name(prefix, &format!("block{i}.{s}"));
            let w = store.kaiming(&p("w"), &[out, prev, k, k], prev * k * k, gain, rng)?;
            let b = store.zeros(&p("b"), &[out], true)?;
            let bn = if cfg.batch_norm {
                Some(BatchNormIds {
                    gamma: store.filled(&p("bn.gamma"), &[out], T::ONE, true)?,
                    beta: store.zeros(&p("bn.beta"), &[out], true)?,
                    running_mean: store.zeros(&p("bn.running_mean"), &[out], false)?,
                    running_var: store.filled(&p("bn.running_var"), &[out], T::ONE, false)?,
                })
            } else {
                None
            };
            blocks.push(Block {
                w,
                b,
                bn,
                stride: cfg.strides[i],
                pad: cfg.paddings[i],
            });
            prev = out;
        }
        let e = cfg.embedding_dim;
        let head_w = store.kaiming(&name(prefix, "head.w"), &[e, cfg.num_classes], e, 1.0, rng)?;
        let head_b = store.zeros(&name(prefix, "head.b"), &[cfg.num_classes], true)?;
        Ok(Cnn {
            cfg: cfg.clone(),
            compress_w,
            compress_b,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Re-attaches to parameters already present in `store` (e.g. after loading a checkpoint).
    pub fn bind<T: Scalar>(cfg: &CnnConfig, prefix: &str, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let get = |s: &str| lookup(store, &name(prefix, s));
        let mut blocks = Vec::with_capacity(4);
        for i in 0..4 {
            let p = |s: &str| format!("block{i}.{s}");
            let bn = if cfg.batch_norm {
                Some(BatchNormIds {
                    gamma: get(&p("bn.gamma"))?,
                    beta: get(&p("bn.beta"))?,
                    running_mean: get(&p("bn.running_mean"))?,
                    running_var: get(&p("bn.running_var"))?,
                })
            } else {
                None
            };
            blocks.push(Block {
                w: get(&p("w"))?,
                b: get(&p("b"))?,
                bn,
                stride: cfg.strides[i],
                pad: cfg.paddings[i],
            });
        }
        Ok(Cnn {
            cfg: cfg.clone(),
            compress_w: get("compress.w")?,
            compress_b: get("compress.b")?,
            blocks,
            head_w: get("head.w")?,
            head_b: get("head.b")?,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    /// Runs the network on `x = [B, in_channels, S, S]`.
    ///
    /// In training mode batch norm uses batch statistics (and updates the running
    /// ones) and head dropout is active with masks drawn from `dropout_seed`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        train: bool,
        dropout_seed: u64,
    ) -> Result<CnnOutput> {
        let s = tape.shape(x).to_vec();
        let ps = self.cfg.patch_size;
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != ps || s[3] != ps {
            return Err(Error::shape(
                "cnn_forward",
                format!(
                    "expected [B, {}, {ps}, {ps}], got {s:?}",
                    self.cfg.in_channels
                ),
            ));
        }
        let mut trace = Vec::with_capacity(5);
        let (w, b) = (tape.param(store, self.compress_w), tape.param(store, self.compress_b));
        let mut h = tape.conv2d(x, w, b, 1, 0)?;
        trace.push(tape.shape(h).to_vec());
        let slope = T::from_f64(self.cfg.leaky_slope);
        for block in &self.blocks {
            let (w, b) = (tape.param(store, block.w), tape.param(store, block.b));
            h = tape.conv2d(h, w, b, block.stride, block.pad)?;
            h = tape.leaky_relu(h, slope);
            if let Some(bn) = &block.bn {
                let (g, be) = (tape.param(store, bn.gamma), tape.param(store, bn.beta));
                let mut rm = std::mem::take(&mut store.get_mut(bn.running_mean).value);
                let mut rv = std::mem::take(&mut store.get_mut(bn.running_var).value);
                let res = tape.batch_norm(
                    h,
                    g,
                    be,
                    &mut rm,
                    &mut rv,
                    BatchNormOpts {
                        train,
                        ..BatchNormOpts::default()
                    },
                );
                store.get_mut(bn.running_mean).value = rm;
                store.get_mut(bn.running_var).value = rv;
                h = res?;
            }
            trace.push(tape.shape(h).to_vec());
        }
        let embeddings = tape.avg_pool_full(h)?;
        let dropped = tape.dropout(embeddings, self.cfg.head_dropout, train, dropout_seed)?;
        let (hw, hb) = (tape.param(store, self.head_w), tape.param(store, self.head_b));
        let logits = tape.linear(dropped, hw, hb)?;
        Ok(CnnOutput {
            embeddings,
            logits,
            trace,
        })
    }
}

/// Stacks patches into a channel-first `[B, C, S, S]` tensor.
pub fn patches_to_batch<T: Scalar>(patches: &[Patch]) -> Result<Tensor<T>> {
    let first = patches
        .first()
        .ok_or_else(|| Error::shape("patches_to_batch", "empty batch"))?;
    let (s, c) = (first.size, first.channels);
    let per = s * s * c;
    let mut chw = vec![0f32; per];
    let mut data = Vec::with_capacity(per * patches.len());
    for p in patches {
        if p.size != s || p.channels != c {
            return Err(Error::shape(
                "patches_to_batch",
                format!("patch {}x{}x{} vs {s}x{s}x{c}", p.size, p.size, p.channels),
            ));
        }
        p.write_chw(&mut chw);
        data.extend(chw.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(&[patches.len(), c, s, s], data)
}

/// Patch-level augmentation settings. Each transform fires independently with its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub p_shift: f64,
    pub max_shift: i32,
    pub p_brightness: f64,
    pub brightness_range: (f64, f64),
    pub p_rotate: f64,
    pub p_rescale: f64,
    pub scale_range: (f64, f64),
    pub p_blur: f64,
    pub max_blur_sigma: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            p_shift: 0.5,
            max_shift: 4,
            p_brightness: 0.5,
            brightness_range: (0.9, 1.1),
            p_rotate: 0.5,
            p_rescale: 0.5,
            scale_range: (0.9, 1.1),
            p_blur: 0.5,
            max_blur_sigma: 1.0,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        AugmentParams {
            p_shift: 0.0,
            p_brightness: 0.0,
            p_rotate: 0.0,
            p_rescale: 0.0,
            p_blur: 0.0,
            ..Default::default()
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Random shift, brightness, right-angle rotation, rescale and Gaussian blur.
/// Deterministic in `seed`.
pub fn augment_patch(patch: &Patch, seed: u64, params: &AugmentParams) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = patch.clone();
    // Decisions are always drawn so each transform's randomness is stable.
    let do_shift = rng.gen::<f64>() < params.p_shift;
    let m = params.max_shift.max(0);
    let (dx, dy) = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
    let do_bright = rng.gen::<f64>() < params.p_brightness;
    let factor = uniform(&mut rng, params.brightness_range);
    let do_rot = rng.gen::<f64>() < params.p_rotate;
    let quarter_turns = rng.gen_range(1..=3);
    let do_scale = rng.gen::<f64>() < params.p_rescale;
    let scale = uniform(&mut rng, params.scale_range);
    let do_blur = rng.gen::<f64>() < params.p_blur;
    let sigma = uniform(&mut rng, (0.0, params.max_blur_sigma));

    if do_shift && (dx != 0 || dy != 0) {
        out = remap(&out, |x, y| Some((x as i64 - dx as i64, y as i64 - dy as i64)));
    }
    if do_bright {
        let f = factor as f32;
        out.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
    if do_rot {
        let s = out.size as i64;
        out = remap(&out, |x, y| {
            let (x, y) = (x as i64, y as i64);
            Some(match quarter_turns {
                1 => (y, s - 1 - x),
                2 => (s - 1 - x, s - 1 - y),
                _ => (s - 1 - y, x),
            })
        });
    }
    if do_scale && (scale - 1.0).abs() > 1e-9 {
        let c = (out.size as f64 - 1.0) / 2.0;
        out = remap(&out, |x, y| {
            Some((
                ((x as f64 - c) / scale + c).round() as i64,
                ((y as f64 - c) / scale + c).round() as i64,
            ))
        });
    }
    if do_blur && sigma > 1e-3 {
        gaussian_blur(&mut out, sigma);
    }
    out
}

/// Pulls `out(x, y) = src(f(x, y))`, zero outside.
fn remap(src: &Patch, f: impl Fn(usize, usize) -> Option<(i64, i64)>) -> Patch {
    let mut out = Patch::zeros(src.size, src.channels);
    out.cropped = src.cropped;
    let s = src.size as i64;
    let c = src.channels;
    for y in 0..src.size {
        for x in 0..src.size {
            if let Some((sx, sy)) = f(x, y) {
                if sx >= 0 && sy >= 0 && sx < s && sy < s {
                    let d = out.idx(x, y, 0);
                    let o = src.idx(sx as usize, sy as usize, 0);
                    out.data[d..d + c].copy_from_slice(&src.data[o..o + c]);
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur per channel with zero boundary.
fn gaussian_blur(p: &mut Patch, sigma: f64) {
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|&k| (k / norm) as f32).collect();
    let (s, c) = (p.size as i64, p.channels);
    for horizontal in [true, false] {
        let src = p.data.clone();
        for y in 0..s {
            for x in 0..s {
                let d = p.idx(x as usize, y as usize, 0);
                for b in 0..c {
                    let mut acc = 0f32;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let o = ki as i64 - r;
                        let (sx, sy) = if horizontal { (x + o, y) } else { (x, y + o) };
                        if sx >= 0 && sy >= 0 && sx < s && sy < s {
                            acc += kv * src[((sy * s + sx) as usize) * c + b];
                        }
                    }
                    p.data[d + b] = acc;
                }
            }
        }
    }
}

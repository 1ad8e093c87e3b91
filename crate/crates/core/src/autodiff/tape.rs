//! Reverse-mode tape. Every operation appends a node holding its output and the
//! data its backward rule needs; `backward` walks the nodes in reverse order.

use rand::{Rng, SeedableRng};

use super::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::scalar::{gemm, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    LeakyRelu(Var, T),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout(Var, Vec<T>),
    AvgPoolFull(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        weight_sum: T,
    },
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterSum(Var, Vec<usize>),
    ScatterMean(Var, Vec<usize>, Vec<T>),
    SegmentSoftmax(Var, Vec<usize>),
    MulCol(Var, Var),
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch-norm hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormOpts {
    pub train: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormOpts {
    fn default() -> Self {
        BatchNormOpts {
            train: true,
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// An append-only record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    retain: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(pid);
                for (acc, &v) in p.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(op, format!("incompatible shapes {a:?} and {b:?}"))
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn add_with<T: Scalar>(slot: &mut Option<Vec<T>>, n: usize, f: impl Fn(usize) -> T) {
    let acc = slot.get_or_insert_with(|| vec![T::ZERO; n]);
    for (i, a) in acc.iter_mut().enumerate() {
        *a += f(i);
    }
}

fn segment_count(seg: &[usize]) -> usize {
    seg.iter().map(|&s| s + 1).max().unwrap_or(0)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            retain: false,
        }
    }

    /// Keep the tape usable for another backward pass.
    pub fn retain_graph(&mut self, retain: bool) {
        self.retain = retain;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Records an input tensor.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Records the current value of a parameter; backward routes its gradient to the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let t = Tensor::new(&p.shape, p.value.clone()).expect("parameter shape is consistent");
        self.push(t, Op::Param(id), p.trainable)
    }

    /// Same values, no history: nothing flows back through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(sa, data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(sa, data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// Adds `b[c]` along axis 1 of a `[N, C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(shape_err("add_bias", &sx, &sb));
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[(i / inner) % c])
            .collect();
        let t = Tensor::new(&sx, data)?;
        let ng = self.ng(&[x, b]);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    /// `[M, K] @ [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// `x [N, I] @ w [I, O] + b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::shape(
                "linear",
                format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        let (n, i, o) = (sx[0], sx[1], sw[1]);
        let bias = self.data(b);
        let mut out: Vec<T> = (0..n * o).map(|j| bias[j % o]).collect();
        gemm(n, i, o, self.data(x), false, self.data(w), false, &mut out, true);
        let t = Tensor::new(&[n, o], out)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(t, Op::Linear(x, w, b), ng))
    }

    /// 2-D convolution of `x [B, Ci, H, W]` with `w [Co, Ci, K, K]` and bias `b [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || sb != [sw[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], stride, pad)
            .ok_or_else(|| {
                Error::shape(
                    "conv2d",
                    format!("kernel {} stride {stride} pad {pad} on {sx:?}", sw[2]),
                )
            })?;
        let out = conv2d_forward(&geom, self.data(x), self.data(w), self.data(b));
        let t = Tensor::new(&[sx[0], sw[0], geom.ho, geom.wo], out)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v > T::ZERO { v } else { v * slope })
            .collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::LeakyRelu(x, slope), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::ZERO)
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`.
    ///
    /// In training mode batch statistics are used and `running_mean` /
    /// `running_var` are updated in place; in eval mode the running statistics
    /// normalize the input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        opts: BatchNormOpts,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2
            || self.shape(gamma) != [sx[1]]
            || self.shape(beta) != [sx[1]]
            || running_mean.len() != sx[1]
            || running_var.len() != sx[1]
        {
            return Err(Error::shape(
                "batch_norm",
                format!("x {sx:?}, gamma {:?}", self.shape(gamma)),
            ));
        }
        let (n, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let m = n * inner;
        if opts.train && m < 2 {
            return Err(Error::shape(
                "batch_norm",
                "training mode needs at least two values per channel",
            ));
        }
        let xd = self.data(x);
        let eps = opts.eps;
        let mut inv_std = vec![T::ZERO; c];
        let mut mean = vec![0f64; c];
        if opts.train {
            let mut var = vec![0f64; c];
            for ch in 0..c {
                let vals = (0..n).flat_map(|s| {
                    let off = (s * c + ch) * inner;
                    xd[off..off + inner].iter().map(|v| v.to_f64())
                });
                let sum: f64 = vals.clone().sum();
                let mu = sum / m as f64;
                let v = vals.map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64;
                mean[ch] = mu;
                var[ch] = v;
                let mom = opts.momentum;
                let unbiased = v * m as f64 / (m as f64 - 1.0);
                running_mean[ch] =
                    T::from_f64((1.0 - mom) * running_mean[ch].to_f64() + mom * mu);
                running_var[ch] =
                    T::from_f64((1.0 - mom) * running_var[ch].to_f64() + mom * unbiased);
            }
            for ch in 0..c {
                inv_std[ch] = T::from_f64(1.0 / (var[ch] + eps).sqrt());
            }
        } else {
            for ch in 0..c {
                mean[ch] = running_mean[ch].to_f64();
                inv_std[ch] = T::from_f64(1.0 / (running_var[ch].to_f64() + eps).sqrt());
            }
        }
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![T::ZERO; xd.len()];
        let mut out = vec![T::ZERO; xd.len()];
        for i in 0..xd.len() {
            let ch = (i / inner) % c;
            let h = (xd[i] - T::from_f64(mean[ch])) * inv_std[ch];
            xhat[i] = h;
            out[i] = g[ch] * h + bt[ch];
        }
        let t = Tensor::new(&sx, out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: opts.train,
            },
            ng,
        ))
    }

    /// Inverted dropout: kept values are scaled by `1 / (1 - p)`. Identity when
    /// `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let keep = if p >= 1.0 { T::ZERO } else { T::from_f64(1.0 / (1.0 - p)) };
        let mask: Vec<T> = (0..self.data(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::ZERO } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Dropout(x, mask), ng))
    }

    /// Global average pooling `[N, C, H, W] -> [N, C]`.
    pub fn avg_pool_full(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("avg_pool_full", format!("expected 4-D, got {sx:?}")));
        }
        let inner = sx[2] * sx[3];
        let scale = T::ONE / T::from_usize(inner);
        let data = self
            .data(x)
            .chunks_exact(inner)
            .map(|c| c.iter().copied().sum::<T>() * scale)
            .collect();
        let t = Tensor::new(&[sx[0], sx[1]], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::AvgPoolFull(x), ng))
    }

    fn rows2(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected 2-D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Row-wise softmax of a `[N, C]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rows2("softmax", x)?;
        let data = softmax_rows(self.data(x), c);
        let t = Tensor::new(&[n, c], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rows2("log_softmax", x)?;
        let data = log_softmax_rows(self.data(x), c);
        let t = Tensor::new(&[n, c], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::LogSoftmax(x), ng))
    }

    /// `sum_i w_i * CE(logits_i, label_i) / sum_i w_i`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        let (n, c) = self.rows2("cross_entropy", logits)?;
        if labels.len() != n || weights.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "{n} rows, {} labels, {} weights",
                    labels.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape("cross_entropy", format!("label {l} >= {c} classes")));
        }
        if weights.iter().any(|&w| !(w >= T::ZERO)) {
            return Err(Error::Domain("cross_entropy: negative or NaN weight".into()));
        }
        let weight_sum: T = weights.iter().copied().sum();
        if !(weight_sum > T::ZERO) {
            return Err(Error::Domain("cross_entropy: all weights are zero".into()));
        }
        let logp = log_softmax_rows(self.data(logits), c);
        let mut loss = T::ZERO;
        for i in 0..n {
            if weights[i] > T::ZERO {
                loss += weights[i] * -logp[i * c + labels[i]];
            }
        }
        let probs = logp.iter().map(|&v| v.exp()).collect();
        let t = Tensor::scalar(loss / weight_sum);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
                weight_sum,
            },
            ng,
        ))
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let n = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(shape_err("concat", self.shape(parts[0]), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(&[n, total], out)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.rows2("slice_cols", x)?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let w = end - start;
        let src = self.data(x);
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&src[r * c + start..r * c + end]);
        }
        let t = Tensor::new(&[n, w], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SliceCols(x, start), ng))
    }

    /// Rows `idx[e]` of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, f) = self.rows2("gather_rows", x)?;
        if let Some(&i) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {i} of {n}")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            out.extend_from_slice(&src[i * f..(i + 1) * f]);
        }
        let t = Tensor::new(&[idx.len(), f], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), ng))
    }

    fn check_segments(&self, op: &'static str, x: Var, seg: &[usize], n: usize) -> Result<usize> {
        let (e, f) = self.rows2(op, x)?;
        if seg.len() != e {
            return Err(Error::shape(op, format!("{e} rows, {} segment ids", seg.len())));
        }
        if let Some(&s) = seg.iter().find(|&&s| s >= n) {
            return Err(Error::shape(op, format!("segment {s} >= {n}")));
        }
        Ok(f)
    }

    /// `out[s] = sum of rows e with seg[e] == s`, for `s < n`.
    pub fn scatter_sum(&mut self, x: Var, seg: &[usize], n: usize) -> Result<Var> {
        let f = self.check_segments("scatter_sum", x, seg, n)?;
        let src = self.data(x);
        let mut out = vec![T::ZERO; n * f];
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..f {
                out[s * f + j] += src[e * f + j];
            }
        }
        let t = Tensor::new(&[n, f], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::ScatterSum(x, seg.to_vec()), ng))
    }

    /// Segment means; empty segments yield zeros.
    pub fn scatter_mean_by_segment(&mut self, x: Var, seg: &[usize], n: usize) -> Result<Var> {
        let f = self.check_segments("scatter_mean_by_segment", x, seg, n)?;
        let mut counts = vec![0usize; n];
        for &s in seg {
            counts[s] += 1;
        }
        let inv: Vec<T> = counts
            .iter()
            .map(|&c| if c == 0 { T::ZERO } else { T::ONE / T::from_usize(c) })
            .collect();
        let src = self.data(x);
        let mut out = vec![T::ZERO; n * f];
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..f {
                out[s * f + j] += src[e * f + j] * inv[s];
            }
        }
        let t = Tensor::new(&[n, f], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::ScatterMean(x, seg.to_vec(), inv), ng))
    }

    /// Softmax of a `[E, 1]` score column within each segment.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize], n: usize) -> Result<Var> {
        let f = self.check_segments("segment_softmax", x, seg, n)?;
        if f != 1 {
            return Err(Error::shape("segment_softmax", format!("expected [E, 1], got {f} cols")));
        }
        let src = self.data(x);
        let mut maxv = vec![None::<T>; n];
        for (e, &s) in seg.iter().enumerate() {
            maxv[s] = Some(match maxv[s] {
                Some(m) => m.max_of(src[e]),
                None => src[e],
            });
        }
        let ex: Vec<T> = seg
            .iter()
            .enumerate()
            .map(|(e, &s)| (src[e] - maxv[s].unwrap_or(T::ZERO)).exp())
            .collect();
        let mut sums = vec![T::ZERO; n];
        for (e, &s) in seg.iter().enumerate() {
            sums[s] += ex[e];
        }
        let out = ex.iter().zip(seg).map(|(&v, &s)| v / sums[s]).collect();
        let t = Tensor::new(&[seg.len(), 1], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SegmentSoftmax(x, seg.to_vec()), ng))
    }

    /// Scales each row of `x [E, F]` by `s [E, 1]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (e, f) = self.rows2("mul_col", x)?;
        if self.shape(s) != [e, 1] {
            return Err(shape_err("mul_col", self.shape(x), self.shape(s)));
        }
        let sd = self.data(s);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[i / f])
            .collect();
        let t = Tensor::new(&[e, f], out)?;
        let ng = self.ng(&[x, s]);
        Ok(self.push(t, Op::MulCol(x, s), ng))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape(
                "backward called twice on a tape that was not retained".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            match self.nodes[i].op {
                Op::Param(pid) => {
                    params.push((i, pid));
                    grads[i] = Some(g);
                }
                Op::Leaf => grads[i] = Some(g),
                _ => {}
            }
        }
        if !self.retain {
            self.consumed = true;
        }
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if ng(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if ng(*a) {
                    add_with(&mut grads[a.0], g.len(), |k| g[k] * db[k]);
                }
                if ng(*b) {
                    add_with(&mut grads[b.0], g.len(), |k| g[k] * da[k]);
                }
            }
            Op::Scale(a, s) => {
                if ng(*a) {
                    add_with(&mut grads[a.0], g.len(), |k| g[k] * *s);
                }
            }
            Op::AddBias(x, b) => {
                if ng(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if ng(*b) {
                    let sx = self.shape(*x);
                    let c = sx[1];
                    let inner: usize = sx[2..].iter().product();
                    let mut gb = vec![T::ZERO; c];
                    for (k, &v) in g.iter().enumerate() {
                        gb[(k / inner) % c] += v;
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if ng(*a) {
                    let mut ga = vec![T::ZERO; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut ga, false);
                    add_into(&mut grads[a.0], &ga);
                }
                if ng(*b) {
                    let mut gb = vec![T::ZERO; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut gb, false);
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Linear(x, w, b) => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, inp, o) = (sx[0], sx[1], sw[1]);
                if ng(*x) {
                    let mut gx = vec![T::ZERO; n * inp];
                    gemm(n, o, inp, g, false, self.data(*w), true, &mut gx, false);
                    add_into(&mut grads[x.0], &gx);
                }
                if ng(*w) {
                    let mut gw = vec![T::ZERO; inp * o];
                    gemm(inp, n, o, self.data(*x), true, g, false, &mut gw, false);
                    add_into(&mut grads[w.0], &gw);
                }
                if ng(*b) {
                    let mut gb = vec![T::ZERO; o];
                    for (k, &v) in g.iter().enumerate() {
                        gb[k % o] += v;
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let res = conv2d_backward(geom, self.data(*x), self.data(*w), g, ng(*x));
                if let Some(dx) = res.dx {
                    add_into(&mut grads[x.0], &dx);
                }
                if ng(*w) {
                    add_into(&mut grads[w.0], &res.dw);
                }
                if ng(*b) {
                    add_into(&mut grads[b.0], &res.db);
                }
            }
            Op::LeakyRelu(x, slope) => {
                if ng(*x) {
                    let xd = self.data(*x);
                    add_with(&mut grads[x.0], g.len(), |k| {
                        if xd[k] > T::ZERO {
                            g[k]
                        } else {
                            g[k] * *slope
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let sx = self.shape(*x);
                let (n, c) = (sx[0], sx[1]);
                let inner: usize = sx[2..].iter().product();
                let m = T::from_usize(n * inner);
                let gm = self.data(*gamma);
                let mut sum_g = vec![T::ZERO; c];
                let mut sum_gx = vec![T::ZERO; c];
                for (k, &v) in g.iter().enumerate() {
                    let ch = (k / inner) % c;
                    sum_g[ch] += v;
                    sum_gx[ch] += v * xhat[k];
                }
                if ng(*gamma) {
                    add_into(&mut grads[gamma.0], &sum_gx);
                }
                if ng(*beta) {
                    add_into(&mut grads[beta.0], &sum_g);
                }
                if ng(*x) {
                    let train = *train;
                    add_with(&mut grads[x.0], g.len(), |k| {
                        let ch = (k / inner) % c;
                        let scale = gm[ch] * inv_std[ch];
                        if train {
                            scale * (g[k] - sum_g[ch] / m - xhat[k] * sum_gx[ch] / m)
                        } else {
                            scale * g[k]
                        }
                    });
                }
            }
            Op::Dropout(x, mask) => {
                if ng(*x) {
                    add_with(&mut grads[x.0], g.len(), |k| g[k] * mask[k]);
                }
            }
            Op::AvgPoolFull(x) => {
                if ng(*x) {
                    let sx = self.shape(*x);
                    let inner = sx[2] * sx[3];
                    let scale = T::ONE / T::from_usize(inner);
                    add_with(&mut grads[x.0], g.len() * inner, |k| g[k / inner] * scale);
                }
            }
            Op::Softmax(x) => {
                if ng(*x) {
                    let c = self.shape(*x)[1];
                    let y = node.value.data();
                    let mut gx = vec![T::ZERO; y.len()];
                    for r in 0..y.len() / c {
                        let row = r * c..(r + 1) * c;
                        let dotp: T = y[row.clone()].iter().zip(&g[row.clone()]).map(|(&a, &b)| a * b).sum();
                        for k in row {
                            gx[k] = y[k] * (g[k] - dotp);
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::LogSoftmax(x) => {
                if ng(*x) {
                    let c = self.shape(*x)[1];
                    let y = node.value.data();
                    let mut gx = vec![T::ZERO; y.len()];
                    for r in 0..y.len() / c {
                        let row = r * c..(r + 1) * c;
                        let gs: T = g[row.clone()].iter().copied().sum();
                        for k in row {
                            gx[k] = g[k] - y[k].exp() * gs;
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
                weight_sum,
            } => {
                if ng(*logits) {
                    let c = self.shape(*logits)[1];
                    let scale = g[0] / *weight_sum;
                    let mut gx = vec![T::ZERO; probs.len()];
                    for (r, (&lab, &w)) in labels.iter().zip(weights).enumerate() {
                        if w == T::ZERO {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == lab { T::ONE } else { T::ZERO };
                            gx[r * c + j] = w * scale * (probs[r * c + j] - onehot);
                        }
                    }
                    add_into(&mut grads[logits.0], &gx);
                }
            }
            Op::Concat(parts) => {
                let total = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if ng(*p) {
                        add_with(&mut grads[p.0], n * w, |k| g[(k / w) * total + off + k % w]);
                    }
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                if ng(*x) {
                    let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let w = node.value.shape()[1];
                    let start = *start;
                    add_with(&mut grads[x.0], n * c, |k| {
                        let (r, col) = (k / c, k % c);
                        if col >= start && col < start + w {
                            g[r * w + col - start]
                        } else {
                            T::ZERO
                        }
                    });
                }
            }
            Op::GatherRows(x, idx) => {
                if ng(*x) {
                    let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut gx = vec![T::ZERO; n * f];
                    for (e, &i) in idx.iter().enumerate() {
                        for j in 0..f {
                            gx[i * f + j] += g[e * f + j];
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::ScatterSum(x, seg) => {
                if ng(*x) {
                    let f = self.shape(*x)[1];
                    add_with(&mut grads[x.0], seg.len() * f, |k| g[seg[k / f] * f + k % f]);
                }
            }
            Op::ScatterMean(x, seg, inv) => {
                if ng(*x) {
                    let f = self.shape(*x)[1];
                    add_with(&mut grads[x.0], seg.len() * f, |k| {
                        let s = seg[k / f];
                        g[s * f + k % f] * inv[s]
                    });
                }
            }
            Op::SegmentSoftmax(x, seg) => {
                if ng(*x) {
                    let y = node.value.data();
                    let n = segment_count(seg);
                    let mut dots = vec![T::ZERO; n];
                    for (e, &s) in seg.iter().enumerate() {
                        dots[s] += g[e] * y[e];
                    }
                    add_with(&mut grads[x.0], seg.len(), |e| y[e] * (g[e] - dots[seg[e]]));
                }
            }
            Op::MulCol(x, s) => {
                let f = self.shape(*x)[1];
                let (xd, sd) = (self.data(*x), self.data(*s));
                if ng(*x) {
                    add_with(&mut grads[x.0], g.len(), |k| g[k] * sd[k / f]);
                }
                if ng(*s) {
                    add_with(&mut grads[s.0], sd.len(), |e| {
                        (0..f).map(|j| g[e * f + j] * xd[e * f + j]).sum()
                    });
                }
            }
            Op::Sum(x) => {
                if ng(*x) {
                    let n = self.data(*x).len();
                    add_with(&mut grads[x.0], n, |_| g[0]);
                }
            }
            Op::Reshape(x) => {
                if ng(*x) {
                    add_into(&mut grads[x.0], g);
                }
            }
        }
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let m = row.iter().copied().fold(row[0], T::max_of);
        let ex: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = ex.iter().copied().sum();
        out.extend(ex.into_iter().map(|v| v / s));
    }
    out
}

pub(crate) fn log_softmax_rows<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let m = row.iter().copied().fold(row[0], T::max_of);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

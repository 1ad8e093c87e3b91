//! Convolution kernels (im2col + GEMM), batched over samples.

use super::scalar::{gemm, Scalar};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn in_size(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_size(&self) -> usize {
        self.cout * self.ho * self.wo
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let npix = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let npix = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[b] = weight @ im2col(x[b]) + bias`.
pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let mut out = vec![T::ZERO; g.batch * g.out_size()];
    let npix = g.ho * g.wo;
    par::for_each_chunk_mut(&mut out, g.out_size(), |b, ob| {
        let xb = &x[b * g.in_size()..(b + 1) * g.in_size()];
        for (co, row) in ob.chunks_exact_mut(npix).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        if g.is_pointwise() {
            gemm(g.cout, g.cin, npix, weight, false, xb, false, ob, true);
        } else {
            let mut cols = vec![T::ZERO; g.col_rows() * npix];
            im2col(g, xb, &mut cols);
            gemm(g.cout, g.col_rows(), npix, weight, false, &cols, false, ob, true);
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

/// Gradients of [`conv2d_forward`]. Per-sample weight gradients are summed in
/// sample order so results do not depend on scheduling.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let npix = g.ho * g.wo;
    let wlen = g.cout * g.col_rows();
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = par::map_range(g.batch, |b| {
        let xb = &x[b * g.in_size()..(b + 1) * g.in_size()];
        let gb = &dout[b * g.out_size()..(b + 1) * g.out_size()];
        let mut dw = vec![T::ZERO; wlen];
        let dx = if g.is_pointwise() {
            gemm(g.cout, npix, g.cin, gb, false, xb, true, &mut dw, false);
            need_dx.then(|| {
                let mut dx = vec![T::ZERO; g.in_size()];
                gemm(g.cin, g.cout, npix, weight, true, gb, false, &mut dx, false);
                dx
            })
        } else {
            let mut cols = vec![T::ZERO; g.col_rows() * npix];
            im2col(g, xb, &mut cols);
            gemm(g.cout, npix, g.col_rows(), gb, false, &cols, true, &mut dw, false);
            need_dx.then(|| {
                gemm(g.col_rows(), g.cout, npix, weight, true, gb, false, &mut cols, false);
                let mut dx = vec![T::ZERO; g.in_size()];
                col2im(g, &cols, &mut dx);
                dx
            })
        };
        (dw, dx)
    });
    let mut dw = vec![T::ZERO; wlen];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * g.in_size()));
    for (pdw, pdx) in per_sample {
        for (a, b) in dw.iter_mut().zip(pdw) {
            *a += b;
        }
        if let (Some(dx), Some(pdx)) = (dx.as_mut(), pdx) {
            dx.extend(pdx);
        }
    }
    let mut db = vec![T::ZERO; g.cout];
    for b in 0..g.batch {
        let gb = &dout[b * g.out_size()..(b + 1) * g.out_size()];
        for (co, row) in gb.chunks_exact(npix).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
    }
    ConvGrads { dx, dw, db }
}

/// Direct seven-loop convolution used as a reference in tests.
#[cfg(test)]
pub(crate) fn conv2d_naive(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_size()];
    for b in 0..g.batch {
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias[co];
                    for ci in 0..g.cin {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += weight[((co * g.cin + ci) * g.k + ki) * g.k + kj]
                                    * x[((b * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[((b * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

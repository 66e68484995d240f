//! Cross-correlation via im2col + GEMM.

use alloc::vec;
use alloc::vec::Vec;

use super::scalar::{gemm, Scalar};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }
    /// A 1×1, stride-1, unpadded conv reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox*stride + k - pad` lies inside `[0, w)`.
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.ohw();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_range(kj, g.pad, g.stride, g.w, g.ow);
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (o, &v) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ohw = g.ohw();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_range(kj, g.pad, g.stride, g.w, g.ow);
                    if lo == hi {
                        continue;
                    }
                    let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let start = lo * g.stride + kj - g.pad;
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(s) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (k, ohw) = (g.k(), g.ohw());
    let mut out = vec![T::zero(); g.batch * g.cout * ohw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * ohw] };
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let colv: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.cout * ohw..(b + 1) * g.cout * ohw];
        gemm(g.cout, k, ohw, T::one(), (weight, k, 1), (colv, ohw, 1), T::zero(), ob, ohw, 1);
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_exact_mut(ohw).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients into the provided buffers.
pub(crate) fn backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (k, ohw) = (g.k(), g.ohw());
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * ohw] };
    let mut dcols = if dx.is_some() && !g.is_pointwise() { vec![T::zero(); k * ohw] } else { Vec::new() };
    for b in 0..g.batch {
        let gb = &gout[b * g.cout * ohw..(b + 1) * g.cout * ohw];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in gb.chunks_exact(ohw).enumerate() {
                let s = row.iter().fold(T::zero(), |acc, &v| acc + v);
                db[co] = db[co] + s;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
            let colv: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW[co, kk] += sum_p gout[co, p] * cols[kk, p]
            gemm(g.cout, ohw, k, T::one(), (gb, ohw, 1), (colv, 1, ohw), T::one(), dw, k, 1);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
            if g.is_pointwise() {
                gemm(k, g.cout, ohw, T::one(), (weight, 1, k), (gb, ohw, 1), T::one(), dxb, ohw, 1);
            } else {
                gemm(k, g.cout, ohw, T::one(), (weight, 1, k), (gb, ohw, 1), T::zero(), &mut dcols, ohw, 1);
                col2im_add(&dcols, g, dxb);
            }
        }
    }
}

use alloc::vec;
use alloc::vec::Vec;

use super::scalar::Scalar;

/// Windowed pooling over `[planes, h, w]`. Returns the output and, for max
/// pooling, the flat input offset (within its plane) of the first maximum in
/// row-major scan order for every output element.
pub(crate) fn pool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    max: bool,
) -> (Vec<T>, Vec<u32>) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut arg = if max { vec![0u32; out.len()] } else { Vec::new() };
    let inv = T::one() / T::from_f64((window * window) as f64);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (p * oh + oy) * ow + ox;
                if max {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for i in 0..window {
                        for j in 0..window {
                            let idx = (oy * stride + i) * w + ox * stride + j;
                            // strict comparison keeps the first maximum
                            if plane[idx] > best || (i == 0 && j == 0) {
                                best = plane[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out[o] = best;
                    arg[o] = best_i as u32;
                } else {
                    let mut s = T::zero();
                    for i in 0..window {
                        for j in 0..window {
                            s = s + plane[(oy * stride + i) * w + ox * stride + j];
                        }
                    }
                    out[o] = s * inv;
                }
            }
        }
    }
    (out, arg)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pool_backward<T: Scalar>(
    gout: &[T],
    arg: &[u32],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    max: bool,
    dx: &mut [T],
) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let inv = T::one() / T::from_f64((window * window) as f64);
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (p * oh + oy) * ow + ox;
                if max {
                    let i = arg[o] as usize;
                    plane[i] = plane[i] + gout[o];
                } else {
                    let g = gout[o] * inv;
                    for i in 0..window {
                        for j in 0..window {
                            let idx = (oy * stride + i) * w + ox * stride + j;
                            plane[idx] = plane[idx] + g;
                        }
                    }
                }
            }
        }
    }
}

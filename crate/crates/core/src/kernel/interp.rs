use alloc::vec;
use alloc::vec::Vec;

use super::scalar::Scalar;

/// Half-pixel-center source coordinate for output index `dst` when resizing
/// an axis of length `in_len` to `out_len`: the two neighbouring input
/// indices and the weight of the upper one.
pub fn bilinear_source(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src as usize).min(in_len - 1);
    let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
    let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

fn axis_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len).map(|d| bilinear_source(d, in_len, out_len)).collect()
}

pub(crate) fn forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if (oh, ow) == (h, w) {
        return x.to_vec();
    }
    let ys = axis_table(h, oh);
    let xs = axis_table(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            let ly = T::from_f64(ly);
            let hy = T::one() - ly;
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let lx = T::from_f64(lx);
                let hx = T::one() - lx;
                let top = hx * plane[y0 * w + x0] + lx * plane[y0 * w + x1];
                let bot = hx * plane[y1 * w + x0] + lx * plane[y1 * w + x1];
                out[(p * oh + oy) * ow + ox] = hy * top + ly * bot;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(gout: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
    if (oh, ow) == (h, w) {
        for (d, &g) in dx.iter_mut().zip(gout) {
            *d = *d + g;
        }
        return;
    }
    let ys = axis_table(h, oh);
    let xs = axis_table(w, ow);
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            let ly = T::from_f64(ly);
            let hy = T::one() - ly;
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let lx = T::from_f64(lx);
                let hx = T::one() - lx;
                let g = gout[(p * oh + oy) * ow + ox];
                plane[y0 * w + x0] = plane[y0 * w + x0] + g * hy * hx;
                plane[y0 * w + x1] = plane[y0 * w + x1] + g * hy * lx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + g * ly * hx;
                plane[y1 * w + x1] = plane[y1 * w + x1] + g * ly * lx;
            }
        }
    }
}

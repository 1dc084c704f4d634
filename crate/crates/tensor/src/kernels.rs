//! Raw numeric kernels on contiguous buffers. Shape validation lives in the
//! graph layer; everything here assumes consistent extents.

use crate::scalar::{gemm, Scalar};

/// Lays out `k×k` zero-padded patches of a `[c, h, w]` image as columns of a
/// `[c·k·k, h·w]` matrix.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kj as isize - pad as isize;
                    for (xo, o) in out_row.iter_mut().enumerate() {
                        let sx = xo as isize + shift;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-accumulates columns back into an image.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let shift = kj as isize - pad as isize;
                let x_lo = (-shift).max(0) as usize;
                let x_hi = (w as isize - shift).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * w..(y + 1) * w];
                    for xo in x_lo..x_hi {
                        dst_row[(xo as isize + shift) as usize] += src_row[xo];
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 cross-correlation.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let hw = h * w;
    let kk = c_in * k * k;
    let mut out = vec![T::zero(); c_out * hw];
    if k == 1 {
        gemm(false, false, c_out, hw, kk, T::one(), weight, x, T::zero(), &mut out);
    } else {
        let mut cols = vec![T::zero(); kk * hw];
        im2col(x, c_in, h, w, k, &mut cols);
        gemm(false, false, c_out, hw, kk, T::one(), weight, &cols, T::zero(), &mut out);
    }
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(hw).enumerate() {
            let bv = b[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    weight: &[T],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let hw = h * w;
    let kk = c_in * k * k;
    let cols_owned;
    let cols: &[T] = if k == 1 {
        x
    } else if need.1 {
        let mut c = vec![T::zero(); kk * hw];
        im2col(x, c_in, h, w, k, &mut c);
        cols_owned = c;
        &cols_owned
    } else {
        &[]
    };

    let weight_grad = need.1.then(|| {
        let mut gw = vec![T::zero(); c_out * kk];
        gemm(false, true, c_out, kk, hw, T::one(), grad_out, cols, T::zero(), &mut gw);
        gw
    });

    let input_grad = need.0.then(|| {
        let mut gcols = vec![T::zero(); kk * hw];
        gemm(true, false, kk, hw, c_out, T::one(), weight, grad_out, T::zero(), &mut gcols);
        if k == 1 {
            gcols
        } else {
            let mut gx = vec![T::zero(); c_in * hw];
            col2im(&gcols, c_in, h, w, k, &mut gx);
            gx
        }
    });

    let bias_grad = need
        .2
        .then(|| grad_out.chunks(hw).map(|row| row.iter().copied().sum()).collect());

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// 2×2 stride-2 max pooling over `[c, h, w]`. Returns the pooled values and,
/// per output element, the flat input index of the winner (first index wins
/// ties, scanning row-major within the window).
pub fn maxpool2_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best_idx = base + 2 * y * w + 2 * xo;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub fn upsample2_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            let src = &x[ci * h * w + (y / 2) * w..ci * h * w + (y / 2 + 1) * w];
            let dst = &mut out[ci * oh * ow + y * ow..ci * oh * ow + (y + 1) * ow];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                gx[ci * h * w + (y / 2) * w + xo / 2] += g[ci * oh * ow + y * ow + xo];
            }
        }
    }
    gx
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(y: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                dot += y[at(j)] * g[at(j)];
            }
            for j in 0..n {
                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    gx
}

/// Relative-position logits for a flattened `h×w` grid:
/// `out[i, j] = q_i · rel_h[row_j − row_i + h − 1] + q_i · rel_w[col_j − col_i + w − 1]`.
pub fn rel_logits_forward<T: Scalar>(
    q: &[T],
    rel_h: &[T],
    rel_w: &[T],
    h: usize,
    w: usize,
    d: usize,
) -> Vec<T> {
    let hw = h * w;
    let (nh, nw) = (2 * h - 1, 2 * w - 1);
    let mut qh = vec![T::zero(); hw * nh];
    let mut qw = vec![T::zero(); hw * nw];
    gemm(false, true, hw, nh, d, T::one(), q, rel_h, T::zero(), &mut qh);
    gemm(false, true, hw, nw, d, T::one(), q, rel_w, T::zero(), &mut qw);
    let mut out = vec![T::zero(); hw * hw];
    for i in 0..hw {
        let (ri, ci) = (i / w, i % w);
        let qh_row = &qh[i * nh..(i + 1) * nh];
        let qw_row = &qw[i * nw..(i + 1) * nw];
        let row = &mut out[i * hw..(i + 1) * hw];
        for rj in 0..h {
            let hv = qh_row[rj + h - 1 - ri];
            for cj in 0..w {
                row[rj * w + cj] = hv + qw_row[cj + w - 1 - ci];
            }
        }
    }
    out
}

pub struct RelLogitGrads<T> {
    pub q: Vec<T>,
    pub rel_h: Vec<T>,
    pub rel_w: Vec<T>,
}

pub fn rel_logits_backward<T: Scalar>(
    g: &[T],
    q: &[T],
    rel_h: &[T],
    rel_w: &[T],
    h: usize,
    w: usize,
    d: usize,
) -> RelLogitGrads<T> {
    let hw = h * w;
    let (nh, nw) = (2 * h - 1, 2 * w - 1);
    let mut gqh = vec![T::zero(); hw * nh];
    let mut gqw = vec![T::zero(); hw * nw];
    for i in 0..hw {
        let (ri, ci) = (i / w, i % w);
        let row = &g[i * hw..(i + 1) * hw];
        for rj in 0..h {
            for cj in 0..w {
                let v = row[rj * w + cj];
                gqh[i * nh + rj + h - 1 - ri] += v;
                gqw[i * nw + cj + w - 1 - ci] += v;
            }
        }
    }
    let mut gq = vec![T::zero(); hw * d];
    gemm(false, false, hw, d, nh, T::one(), &gqh, rel_h, T::zero(), &mut gq);
    gemm(false, false, hw, d, nw, T::one(), &gqw, rel_w, T::one(), &mut gq);
    let mut grh = vec![T::zero(); nh * d];
    let mut grw = vec![T::zero(); nw * d];
    gemm(true, false, nh, d, hw, T::one(), &gqh, q, T::zero(), &mut grh);
    gemm(true, false, nw, d, hw, T::one(), &gqw, q, T::zero(), &mut grw);
    RelLogitGrads {
        q: gq,
        rel_h: grh,
        rel_w: grw,
    }
}

/// `[c, h, w] → [c·p², h/p, w/p]`; output channel `(ci·p + dy)·p + dx`.
pub fn space_to_depth<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (oh, ow) = (h / p, w / p);
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        for y in 0..h {
            for xo in 0..w {
                let oc = (ci * p + y % p) * p + xo % p;
                out[oc * oh * ow + (y / p) * ow + xo / p] = x[ci * h * w + y * w + xo];
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`]; `c` is the channel count of the *output*.
pub fn depth_to_space<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (ih, iw) = (h / p, w / p);
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        for y in 0..h {
            for xo in 0..w {
                let ic = (ci * p + y % p) * p + xo % p;
                out[ci * h * w + y * w + xo] = x[ic * ih * iw + (y / p) * iw + xo / p];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let y: Vec<f64> = (0..c * k * k * h * w)
            .map(|i| ((i * 5 % 13) as f64) * 0.5 - 3.0)
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn space_to_depth_round_trips() {
        let x: Vec<f32> = (0..2 * 8 * 8).map(|i| i as f32).collect();
        let s = space_to_depth(&x, 2, 8, 8, 4);
        assert_eq!(depth_to_space(&s, 2, 8, 8, 4), x);
    }

    #[test]
    fn maxpool_first_index_wins_ties() {
        let x = [1.0f64, 1.0, 1.0, 1.0];
        let (v, arg) = maxpool2_forward(&x, 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}

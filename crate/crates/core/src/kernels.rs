//! Raw compute kernels shared by the autodiff ops and graph-free inference.
//!
//! All batched kernels split work per sample and reduce across samples in
//! index order, so results do not depend on the rayon thread count.

use rayon::prelude::*;

use crate::tensor::Real;

/// Geometry of a same-padded, stride-1 square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.height * self.width
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let hw = g.hw();
    for c in 0..g.c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let dst = &mut col[r * hw..(r + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w - dx).min(w).max(0) as usize;
                for y in 0..h {
                    let sy = y + dy;
                    let out_row = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h || x_lo >= x_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    out_row[..x_lo].fill(T::zero());
                    out_row[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let hw = g.hw();
    x.fill(T::zero());
    for c in 0..g.c_in {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let src = &col[r * hw..(r + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w - dx).min(w).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let in_row = &src[(y * w) as usize..((y + 1) * w) as usize];
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for (d, s) in dst[s0..s0 + (x_hi - x_lo)].iter_mut().zip(&in_row[x_lo..x_hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// `out[b] = W · im2col(x[b])`, no bias.
pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.hw();
    let mut out = vec![T::zero(); g.batch * g.c_out * hw];
    out.par_chunks_mut(g.c_out * hw)
        .zip(x.par_chunks(g.c_in * hw))
        .for_each(|(o, xs)| {
            if g.kernel == 1 {
                T::gemm(g.c_out, g.c_in, hw, weight, false, xs, false, o, false);
            } else {
                let mut col = vec![T::zero(); g.col_rows() * hw];
                im2col(xs, g, &mut col);
                T::gemm(g.c_out, g.col_rows(), hw, weight, false, &col, false, o, false);
            }
        });
    out
}

/// Gradient of the convolution with respect to its input; also the
/// transposed convolution of `gout` by `weight`.
pub fn conv2d_backward_input<T: Real>(gout: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.hw();
    let mut dx = vec![T::zero(); g.batch * g.c_in * hw];
    dx.par_chunks_mut(g.c_in * hw)
        .zip(gout.par_chunks(g.c_out * hw))
        .for_each(|(d, go)| {
            if g.kernel == 1 {
                T::gemm(g.c_in, g.c_out, hw, weight, true, go, false, d, false);
            } else {
                let mut col = vec![T::zero(); g.col_rows() * hw];
                T::gemm(g.col_rows(), g.c_out, hw, weight, true, go, false, &mut col, false);
                col2im(&col, g, d);
            }
        });
    dx
}

/// Gradient of the convolution with respect to its weight, summed over the
/// batch in sample order.
pub fn conv2d_backward_weight<T: Real>(x: &[T], gout: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.hw();
    let wlen = g.c_out * g.col_rows();
    let per_sample: Vec<Vec<T>> = x
        .par_chunks(g.c_in * hw)
        .zip(gout.par_chunks(g.c_out * hw))
        .map(|(xs, go)| {
            let mut dw = vec![T::zero(); wlen];
            if g.kernel == 1 {
                T::gemm(g.c_out, hw, g.c_in, go, false, xs, true, &mut dw, false);
            } else {
                let mut col = vec![T::zero(); g.col_rows() * hw];
                im2col(xs, g, &mut col);
                T::gemm(g.c_out, hw, g.col_rows(), go, false, &col, true, &mut dw, false);
            }
            dw
        })
        .collect();
    let mut total = vec![T::zero(); wlen];
    for dw in per_sample {
        for (t, v) in total.iter_mut().zip(dw) {
            *t += v;
        }
    }
    total
}

/// Nearest-neighbour 2× upsample of `[planes, h, w]`.
pub fn upsample2x<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (x2, d) in drow.iter_mut().enumerate() {
                *d = srow[x2 / 2];
            }
        }
    }
    out
}

/// Sum over each 2×2 block of `[planes, 2h, 2w]`; adjoint of [`upsample2x`].
pub fn sum_pool2x<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ih, iw) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &x[p * ih * iw..(p + 1) * ih * iw];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..ih {
            let srow = &src[y * iw..(y + 1) * iw];
            let drow = &mut dst[(y / 2) * w..(y / 2 + 1) * w];
            for (x2, s) in srow.iter().enumerate() {
                drow[x2 / 2] += *s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (h, wd, k) = (g.height as isize, g.width as isize, g.kernel as isize);
        let pad = k / 2;
        let mut out = vec![0.0; g.batch * g.c_out * g.hw()];
        for b in 0..g.batch {
            for co in 0..g.c_out {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y + ky - pad;
                                    let sx = xx + kx - pad;
                                    if sy < 0 || sy >= h || sx < 0 || sx >= wd {
                                        continue;
                                    }
                                    let xi = ((b * g.c_in + ci) as isize * h + sy) * wd + sx;
                                    let wi = ((co * g.c_in + ci) as isize * k + ky) * k + kx;
                                    acc += x[xi as usize] * w[wi as usize];
                                }
                            }
                        }
                        out[((b * g.c_out + co) as isize * h * wd + y * wd + xx) as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for kernel in [1, 3] {
            let g = ConvGeom { batch: 2, c_in: 3, c_out: 4, height: 5, width: 6, kernel };
            let x: Vec<f64> = (0..g.batch * g.c_in * 30).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> =
                (0..g.c_out * g.c_in * kernel * kernel).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
            let fast = conv2d_forward(&x, &w, &g);
            let slow = naive_conv(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_input_is_adjoint_of_forward() {
        // <conv(x), y> == <x, conv^T(y)>
        let g = ConvGeom { batch: 2, c_in: 2, c_out: 3, height: 4, width: 4, kernel: 3 };
        let x: Vec<f64> = (0..g.batch * g.c_in * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.batch * g.c_out * 16).map(|i| (i as f64 * 0.11).cos()).collect();
        let w: Vec<f64> = (0..g.c_out * g.c_in * 9).map(|i| (i as f64 * 0.7).sin()).collect();
        let lhs: f64 = conv2d_forward(&x, &w, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(conv2d_backward_input(&y, &w, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // <conv(x; w), y> is linear in w with gradient backward_weight
        let dw = conv2d_backward_weight(&x, &y, &g);
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn pool_is_adjoint_of_upsample() {
        let x: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..2 * 6 * 6).map(|i| (i as f64).sqrt()).collect();
        let lhs: f64 = upsample2x(&x, 2, 3, 3).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(sum_pool2x(&y, 2, 3, 3)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}

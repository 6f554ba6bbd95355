//! Raw array kernels behind the graph ops. All of them work on contiguous
//! row-major NCHW buffers and iterate in a fixed order.

use crate::element::{matmul, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let plane = oh * ow;
    for c in 0..g.in_c {
        let src = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let plane = oh * ow;
    for c in 0..g.in_c {
        let dst = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            let d = &mut dst[base + ix as usize];
                            *d = *d + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w)` without bias. `x` is `[n, in_c, in_h, in_w]`, `w` is
/// `[out_c, in_c, k, k]`.
pub fn conv2d_forward<T: Element>(x: &[T], w: &[T], n: usize, g: &ConvGeometry) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let kk = g.patch_len();
    let in_len = g.in_c * g.in_h * g.in_w;
    let mut y = vec![T::zero(); n * g.out_c * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let yb = &mut y[b * g.out_c * plane..(b + 1) * g.out_c * plane];
        let cols_ref: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        matmul(w, cols_ref, yb, g.out_c, kk, plane, false, false, false);
    }
    y
}

/// Gradients of [`conv2d_forward`]. Either output may be skipped.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    g: &ConvGeometry,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_h() * g.out_w();
    let kk = g.patch_len();
    let in_len = g.in_c * g.in_h * g.in_w;
    let mut dx = want_dx.then(|| vec![T::zero(); n * in_len]);
    let mut dw = want_dw.then(|| vec![T::zero(); g.out_c * kk]);
    let mut cols = vec![T::zero(); kk * plane];
    for b in 0..n {
        let dyb = &dy[b * g.out_c * plane..(b + 1) * g.out_c * plane];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                matmul(dyb, xb, dw, g.out_c, plane, kk, false, true, true);
            } else {
                im2col(xb, g, &mut cols);
                matmul(dyb, &cols, dw, g.out_c, plane, kk, false, true, true);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                matmul(w, dyb, dxb, kk, g.out_c, plane, true, false, false);
            } else {
                matmul(w, dyb, &mut cols, kk, g.out_c, plane, true, false, false);
                col2im_add(&cols, g, dxb);
            }
        }
    }
    (dx, dw)
}

/// Per-sample group statistics `(mean, 1/sqrt(var + eps))`, each `[n * groups]`.
pub fn group_norm_stats<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let per = c / groups * hw;
    let inv = T::from_f64_lossy(1.0 / per as f64);
    let eps = T::from_f64_lossy(eps);
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for chunk in x[..n * c * hw].chunks(per) {
        let mean = chunk.iter().fold(T::zero(), |a, &v| a + v) * inv;
        let var = chunk.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv;
        means.push(mean);
        rstds.push(T::one() / (var + eps).sqrt());
    }
    (means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    means: &[T],
    rstds: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> Vec<T> {
    let cpg = c / groups;
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let gi = b * groups + ch / cpg;
            let (m, r) = (means[gi], rstds[gi]);
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                y[i] = (x[i] - m) * r * gamma[ch] + beta[ch];
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn group_norm_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let per = T::from_f64_lossy((cpg * hw) as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for gr in 0..groups {
            let gi = b * groups + gr;
            let (m, r) = (means[gi], rstds[gi]);
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ch in gr * cpg..(gr + 1) * cpg {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - m) * r;
                    let dxhat = dy[i] * gamma[ch];
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    dgamma[ch] = dgamma[ch] + dy[i] * xhat;
                    dbeta[ch] = dbeta[ch] + dy[i];
                }
            }
            let mean_dxhat = sum_dxhat / per;
            let mean_dxhat_xhat = sum_dxhat_xhat / per;
            for ch in gr * cpg..(gr + 1) * cpg {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - m) * r;
                    let dxhat = dy[i] * gamma[ch];
                    dx[i] = r * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Nearest-neighbour upsampling by an integer factor over `planes` HxW planes.
pub fn upsample_nearest<T: Element>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut y = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let row = &src[(oy / f) * w..(oy / f + 1) * w];
            for ox in 0..ow {
                y.push(row[ox / f]);
            }
        }
    }
    y
}

pub fn upsample_nearest_backward<T: Element>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let d = &mut dst[(oy / f) * w + ox / f];
                *d = *d + src[oy * ow + ox];
            }
        }
    }
    dx
}

/// Bilinear resize of `planes` HxW planes with half-pixel centres
/// (`align_corners = false`), edge-clamped.
pub fn resize_bilinear<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, oh);
    let xs = taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = src[y0 * w + x0].to_f64_lossy() * (1.0 - lx) + src[y0 * w + x1].to_f64_lossy() * lx;
                let bot = src[y1 * w + x0].to_f64_lossy() * (1.0 - lx) + src[y1 * w + x1].to_f64_lossy() * lx;
                out.push(T::from_f64_lossy(top * (1.0 - ly) + bot * ly));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], w: &[f64], n: usize, g: &ConvGeometry) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; n * g.out_c * oh * ow];
        for b in 0..n {
            for o in 0..g.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.in_c {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xv = x[((b * g.in_c + c) * g.in_h + iy as usize) * g.in_w + ix as usize];
                                    let wv = w[((o * g.in_c + c) * g.kernel + ki) * g.kernel + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y[((b * g.out_c + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for (kernel, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (2, 2, 0)] {
            let g = ConvGeometry { in_c: 3, in_h: 7, in_w: 6, out_c: 4, kernel, stride, pad };
            let n = 2;
            let x: Vec<f64> = (0..n * 3 * 7 * 6).map(|i| ((i * 7919) % 23) as f64 / 11.0 - 1.0).collect();
            let w: Vec<f64> = (0..4 * 3 * kernel * kernel).map(|i| ((i * 104729) % 17) as f64 / 8.0 - 1.0).collect();
            let got = conv2d_forward(&x, &w, n, &g);
            let want = direct_conv(&x, &w, n, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "k={kernel} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x, w), dy> = <x, dx(dy)> = <w, dw(dy)> since conv is bilinear.
        let g = ConvGeometry { in_c: 2, in_h: 5, in_w: 5, out_c: 3, kernel: 3, stride: 2, pad: 1 };
        let n = 2;
        let x: Vec<f64> = (0..n * 2 * 25).map(|i| (i as f64 * 0.3).sin()).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.7).cos()).collect();
        let y = conv2d_forward(&x, &w, n, &g);
        let dy: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.13).sin()).collect();
        let (dx, dw) = conv2d_backward(&x, &w, &dy, n, &g, true, true);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.iter().zip(dx.unwrap().iter()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(dw.unwrap().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-9);
        assert!((lhs - via_w).abs() < 1e-9);
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let (n, c, hw, groups) = (2, 4, 9, 2);
        let x: Vec<f64> = (0..n * c * hw).map(|i| (i as f64 * 1.7).sin() * 3.0 + 1.0).collect();
        let (m, r) = group_norm_stats(&x, n, c, hw, groups, 0.0);
        let y = group_norm_forward(&x, &[1.0; 4], &[0.0; 4], &m, &r, n, c, hw, groups);
        for chunk in y.chunks(c / groups * hw) {
            let mean: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
            let var: f64 = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / chunk.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let y = upsample_nearest(&x, 1, 2, 2, 2);
        assert_eq!(y[..4], [1.0, 1.0, 2.0, 2.0]);
        let dx = upsample_nearest_backward(&[1.0f64; 16], 1, 2, 2, 2);
        assert_eq!(dx, vec![4.0; 4]);
    }

    #[test]
    fn bilinear_identity_when_sizes_match() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resize_bilinear(&x, 1, 3, 4, 3, 4), x);
    }
}

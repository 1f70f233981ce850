//! Forward and backward kernels for the layers the network and the loss
//! terms use. All tensors are row-major; image batches are `N x C x H x W`.

use crate::scalar::Scalar;

/// Unfolds one `C x H x W` sample into a `(C*k*k) x (H*W)` patch matrix
/// with zero padding `k/2` (stride 1, "same" output size).
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let out = &mut col[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    let dst = &mut out[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    for (j, d) in dst.iter_mut().enumerate() {
                        let sj = j as isize + dj;
                        *d = if sj < 0 || sj >= w as isize { T::zero() } else { src[sj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `dx`.
pub fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let base = ci * hw + si as usize * w;
                    for j in 0..w {
                        let sj = j as isize + dj;
                        if sj >= 0 && sj < w as isize {
                            let idx = base + sj as usize;
                            dx[idx] = dx[idx] + src[i * w + j];
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let hw = d.h * d.w;
    let patch = d.patch();
    let mut col = vec![T::zero(); patch * hw];
    let mut out = vec![T::zero(); d.n * d.cout * hw];
    for s in 0..d.n {
        im2col(&x[s * d.cin * hw..(s + 1) * d.cin * hw], d.cin, d.h, d.w, d.k, &mut col);
        let o = &mut out[s * d.cout * hw..(s + 1) * d.cout * hw];
        for (co, b) in bias.iter().enumerate() {
            o[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = *b);
        }
        T::gemm(d.cout, patch, hw, T::one(), weight, false, &col, false, T::one(), o);
    }
    out
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Scalar>(x: &[T], weight: &[T], dy: &[T], d: &ConvDims) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = d.h * d.w;
    let patch = d.patch();
    let mut col = vec![T::zero(); patch * hw];
    let mut dcol = vec![T::zero(); patch * hw];
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); d.cout];
    for s in 0..d.n {
        let xs = &x[s * d.cin * hw..(s + 1) * d.cin * hw];
        let g = &dy[s * d.cout * hw..(s + 1) * d.cout * hw];
        im2col(xs, d.cin, d.h, d.w, d.k, &mut col);
        T::gemm(d.cout, hw, patch, T::one(), g, false, &col, true, T::one(), &mut dw);
        for (co, b) in db.iter_mut().enumerate() {
            *b = *b + g[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        T::gemm(patch, d.cout, hw, T::one(), weight, true, g, false, T::zero(), &mut dcol);
        col2im(&dcol, d.cin, d.h, d.w, d.k, &mut dx[s * d.cin * hw..(s + 1) * d.cin * hw]);
    }
    (dx, dw, db)
}

/// Per-channel mean and biased variance over `N x H x W`.
pub fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for smp in 0..n {
            s = s + x[(smp * c + ch) * hw..(smp * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut q = T::zero();
        for smp in 0..n {
            for &v in &x[(smp * c + ch) * hw..(smp * c + ch + 1) * hw] {
                q = q + (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

/// Normalizes with the given statistics; returns `(y, xhat, inv_std)`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for smp in 0..n {
        for ch in 0..c {
            let r = (smp * c + ch) * hw..(smp * c + ch + 1) * hw;
            for idx in r {
                let xh = (x[idx] - mean[ch]) * inv_std[ch];
                xhat[idx] = xh;
                y[idx] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Batch-statistics backward. With `batch_stats == false` the statistics
/// are constants (evaluation mode) and only the affine part differentiates.
/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    hw: usize,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::of((n * hw) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for smp in 0..n {
            for idx in (smp * c + ch) * hw..(smp * c + ch + 1) * hw {
                dgamma[ch] = dgamma[ch] + dy[idx] * xhat[idx];
                dbeta[ch] = dbeta[ch] + dy[idx];
                let dxh = dy[idx] * gamma[ch];
                sum_dxh = sum_dxh + dxh;
                sum_dxh_xh = sum_dxh_xh + dxh * xhat[idx];
            }
        }
        for smp in 0..n {
            for idx in (smp * c + ch) * hw..(smp * c + ch + 1) * hw {
                let dxh = dy[idx] * gamma[ch];
                dx[idx] = if batch_stats {
                    inv_std[ch] / m * (m * dxh - sum_dxh - xhat[idx] * sum_dxh_xh)
                } else {
                    dxh * inv_std[ch]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2x2 mean pooling with stride 2 on `N x C x H x W` (H, W even).
pub fn avg_pool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = (a + b + c + d) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = g[(i / 2) * ow + j / 2] * quarter;
            }
        }
    }
    dx
}

/// Numerically stable row softmax of an `n x c` matrix.
pub fn softmax_rows<T: Scalar>(logits: &[T], n: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (k, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[i * c + k] = e;
            z = z + e;
        }
        out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = *v / z);
    }
    out
}

/// `-log softmax(row)[target]` computed via log-sum-exp.
pub fn cross_entropy_row<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    lse - row[target]
}

/// Euclidean distances between every row of `a` (`n x d`) and of `b`
/// (`m x d`), returned as `n x m`.
pub fn pairwise_distances<T: Scalar>(a: &[T], n: usize, b: &[T], m: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for k in 0..m {
            let bk = &b[k * d..(k + 1) * d];
            let sq: T = ai.iter().zip(bk).map(|(&x, &y)| (x - y) * (x - y)).sum();
            out[i * m + k] = sq.sqrt();
        }
    }
    out
}

/// Gaussian RBF similarities `exp(-|f_i - f_j|^2 / (2 beta_sq))`, `n x n`.
pub fn rbf_matrix<T: Scalar>(f: &[T], n: usize, d: usize, beta_sq: T) -> Vec<T> {
    let two_b = T::of(2.0) * beta_sq;
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        out[i * n + i] = T::one();
        for j in i + 1..n {
            let sq: T = f[i * d..(i + 1) * d]
                .iter()
                .zip(&f[j * d..(j + 1) * d])
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            let h = (-sq / two_b).exp();
            out[i * n + j] = h;
            out[j * n + i] = h;
        }
    }
    out
}

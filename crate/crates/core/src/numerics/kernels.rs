//! Slice-level forward and backward kernels shared by the public ops and the
//! tape. Shapes are validated by the callers; these functions assume them.

use super::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a batch: `x` is `n x c_in x h x w`, `w` is
/// `c_out x c_in x k x k`, output `n x c_out x ho x wo`.
pub fn conv2d_forward<T: Scalar>(x: &[T], n: usize, g: &ConvGeom, w: &[T], b: &[T]) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.patch();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut out = vec![T::zero(); n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let yi = &mut out[i * out_len..(i + 1) * out_len];
        for (co, bias) in b.iter().enumerate() {
            yi[co * p..(co + 1) * p].fill(*bias);
        }
        let src: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        T::gemm(g.c_out, kk, p, T::one(), w, (kk as isize, 1), src, (p as isize, 1), T::one(), yi, (p as isize, 1));
    }
    out
}

/// Gradients of [`conv2d_forward`]. `dw` and `db` are accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.patch();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
    let mut dcols = vec![T::zero(); kk * p];
    let mut dx = dx;
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let dyi = &dy[i * out_len..(i + 1) * out_len];
        for (co, d) in db.iter_mut().enumerate() {
            *d = dyi[co * p..(co + 1) * p].iter().fold(*d, |acc, &v| acc + v);
        }
        let src: &[T] = if pointwise {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        // dw += dy_i (c_out x p) * src^T (p x kk)
        T::gemm(g.c_out, p, kk, T::one(), dyi, (p as isize, 1), src, (1, p as isize), T::one(), dw, (kk as isize, 1));
        if let Some(dx) = dx.as_deref_mut() {
            let dxi = &mut dx[i * in_len..(i + 1) * in_len];
            if pointwise {
                T::gemm(kk, g.c_out, p, T::one(), w, (1, kk as isize), dyi, (p as isize, 1), T::one(), dxi, (p as isize, 1));
            } else {
                T::gemm(kk, g.c_out, p, T::one(), w, (1, kk as isize), dyi, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
                col2im_add(&dcols, g, dxi);
            }
        }
    }
}

/// Per-channel statistics cached by a train-mode batch-norm forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BnCache<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Batch-norm forward over `n x c x s` (s = spatial size). With `stats` given,
/// normalizes by those (eval mode); otherwise by biased batch statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    stats: Option<(&[T], &[T])>,
) -> (Vec<T>, BnCache<T>) {
    let (mean, var) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let count = T::from_f64((n * s) as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = 0.0f64;
                for i in 0..n {
                    acc += x[(i * c + ch) * s..][..s].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = acc / count.as_f64();
                let mut sq = 0.0f64;
                for i in 0..n {
                    sq += x[(i * c + ch) * s..][..s].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                }
                mean[ch] = T::from_f64(m);
                var[ch] = T::from_f64(sq / count.as_f64());
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * s;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for (o, &v) in y[off..off + s].iter_mut().zip(&x[off..off + s]) {
                *o = v * scale + shift;
            }
        }
    }
    (y, BnCache { mean, var, inv_std })
}

/// Batch-norm backward. `train` selects whether gradients flow through the
/// batch statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[T],
    cache: &BnCache<T>,
    train: bool,
    dy: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let m = T::from_f64((n * s) as f64);
    for ch in 0..c {
        let mean = cache.mean[ch];
        let inv = cache.inv_std[ch];
        // the per-channel sums run over n * s values; accumulate in f64
        let (mut acc_dy, mut acc_dy_xhat) = (0.0f64, 0.0f64);
        for i in 0..n {
            let off = (i * c + ch) * s;
            for (&d, &v) in dy[off..off + s].iter().zip(&x[off..off + s]) {
                acc_dy += d.as_f64();
                acc_dy_xhat += (d * (v - mean) * inv).as_f64();
            }
        }
        let (sum_dy, sum_dy_xhat) = (T::from_f64(acc_dy), T::from_f64(acc_dy_xhat));
        dgamma[ch] = dgamma[ch] + sum_dy_xhat;
        dbeta[ch] = dbeta[ch] + sum_dy;
        let g = gamma[ch];
        for i in 0..n {
            let off = (i * c + ch) * s;
            for j in off..off + s {
                let d = if train {
                    let xhat = (x[j] - mean) * inv;
                    g * inv * (dy[j] - sum_dy / m - xhat * sum_dy_xhat / m)
                } else {
                    g * inv * dy[j]
                };
                dx[j] = dx[j] + d;
            }
        }
    }
}

/// `y = x * w^T + b` with `x: n x d_in`, `w: d_out x d_in`.
pub fn linear_forward<T: Scalar>(x: &[T], n: usize, d_in: usize, w: &[T], b: &[T], d_out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    T::gemm(n, d_in, d_out, T::one(), x, (d_in as isize, 1), w, (1, d_in as isize), T::one(), &mut y, (d_out as isize, 1));
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    n: usize,
    d_in: usize,
    w: &[T],
    d_out: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    if let Some(dx) = dx {
        T::gemm(n, d_out, d_in, T::one(), dy, (d_out as isize, 1), w, (d_in as isize, 1), T::one(), dx, (d_in as isize, 1));
    }
    T::gemm(d_out, n, d_in, T::one(), dy, (1, d_out as isize), x, (d_in as isize, 1), T::one(), dw, (d_in as isize, 1));
    for i in 0..n {
        for (acc, &d) in db.iter_mut().zip(&dy[i * d_out..(i + 1) * d_out]) {
            *acc = *acc + d;
        }
    }
}

/// Row-wise log-softmax, max-subtracted.
pub fn log_softmax_rows<T: Scalar>(logits: &[T], n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for (o, &v) in out[i * k..(i + 1) * k].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// Embedded-Gaussian attention for one image: `theta`, `phi`, `g` are
/// `c x s`. Returns `(y, attn)` with `y = g * attn^T` (`c x s`) and `attn` the
/// row-softmax of `theta^T phi` (`s x s`).
pub fn attention_forward<T: Scalar>(theta: &[T], phi: &[T], g: &[T], c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let mut attn = vec![T::zero(); s * s];
    T::gemm(s, c, s, T::one(), theta, (1, s as isize), phi, (s as isize, 1), T::zero(), &mut attn, (s as isize, 1));
    for row in attn.chunks_mut(s) {
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    let mut y = vec![T::zero(); c * s];
    T::gemm(c, s, s, T::one(), g, (s as isize, 1), &attn, (1, s as isize), T::zero(), &mut y, (s as isize, 1));
    (y, attn)
}

/// Gradients of [`attention_forward`], accumulated into the three outputs.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    theta: &[T],
    phi: &[T],
    g: &[T],
    attn: &[T],
    c: usize,
    s: usize,
    dy: &[T],
    dtheta: &mut [T],
    dphi: &mut [T],
    dg: &mut [T],
) {
    let si = s as isize;
    // dA = dy^T g
    let mut da = vec![T::zero(); s * s];
    T::gemm(s, c, s, T::one(), dy, (1, si), g, (si, 1), T::zero(), &mut da, (si, 1));
    // dg += dy A
    T::gemm(c, s, s, T::one(), dy, (si, 1), attn, (si, 1), T::one(), dg, (si, 1));
    // softmax backward, in place on da
    for (drow, arow) in da.chunks_mut(s).zip(attn.chunks(s)) {
        let dot: T = drow.iter().zip(arow).map(|(&d, &a)| d * a).sum();
        for (d, &a) in drow.iter_mut().zip(arow) {
            *d = a * (*d - dot);
        }
    }
    // dtheta += phi dS^T ; dphi += theta dS
    T::gemm(c, s, s, T::one(), phi, (si, 1), &da, (1, si), T::one(), dtheta, (si, 1));
    T::gemm(c, s, s, T::one(), theta, (si, 1), &da, (si, 1), T::one(), dphi, (si, 1));
}

/// Numerically stable `log(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

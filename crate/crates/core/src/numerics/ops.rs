//! Forward primitives on whole tensors, with shape validation.
//!
//! These are the eager counterparts of the ops recorded by [`super::Tape`];
//! both paths call the same kernels.

use super::kernels::{self, ConvGeom};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Batch-norm mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BnMode {
    #[default]
    Train,
    Eval,
}

/// Self-contained batch-norm layer state for eager use.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BnState<T> {
    /// Fresh state: gamma 1, beta 0, running mean 0, running var 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], T::one()),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], T::one()),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Fold batch statistics into running estimates.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    batch_mean: &[T],
    batch_var: &[T],
    momentum: f64,
) {
    let m = T::from_f64(momentum);
    let keep = T::one() - m;
    for (r, &b) in running_mean.iter_mut().zip(batch_mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.iter_mut().zip(batch_var) {
        *r = (keep * *r + m * b).max(T::zero());
    }
}

pub(crate) fn conv_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, ConvGeom)> {
    let (n, c_in, h, wd) = x.dims4()?;
    let [c_out, wc_in, k, k2] = *w.shape() else {
        return Err(Error::shape("conv2d", format!("weight must be 4-d, got {:?}", w.shape())));
    };
    if wc_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} has {c_in} channels but weight {:?} expects {wc_in}", x.shape(), w.shape()),
        ));
    }
    if k != k2 || !(k == 1 || k == 3) {
        return Err(Error::invalid("conv2d", format!("kernel must be 1x1 or 3x3, got {k}x{k2}")));
    }
    if !(pad == 0 || pad == (k - 1) / 2) {
        return Err(Error::invalid("conv2d", format!("pad {pad} not allowed for {k}x{k} kernel")));
    }
    if stride == 0 || h < k || wd < k {
        return Err(Error::invalid("conv2d", format!("stride {stride} with spatial {h}x{wd} and kernel {k}")));
    }
    if b.shape() != [c_out] {
        return Err(Error::shape("conv2d", format!("bias {:?} does not match {c_out} filters", b.shape())));
    }
    Ok((n, ConvGeom { c_in, h, w: wd, c_out, k, stride, pad }))
}

/// 2-d cross-correlation. `x` may be `C x H x W` or `N x C x H x W`; the
/// output has the same rank.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (n, g) = conv_geom(x, w, b, stride, pad)?;
    let (ho, wo) = g.out_hw();
    let y = kernels::conv2d_forward(x.data(), n, &g, w.data(), b.data());
    let shape = if x.ndim() == 3 { vec![g.c_out, ho, wo] } else { vec![n, g.c_out, ho, wo] };
    Tensor::new(shape, y)
}

/// Batch normalization over `N x C x H x W` (or `N x C`). Train mode uses
/// biased batch statistics and updates the running estimates in `s`.
pub fn batch_norm<T: Scalar>(x: &Tensor<T>, s: &mut BnState<T>) -> Result<Tensor<T>> {
    let (n, c, spatial) = bn_dims(x)?;
    if c != s.channels() {
        return Err(Error::shape("batch_norm", format!("input {:?} vs {} BN channels", x.shape(), s.channels())));
    }
    let eps = T::from_f64(s.eps);
    match s.mode {
        BnMode::Train => {
            if n * spatial < 2 {
                return Err(Error::invalid(
                    "batch_norm",
                    "train mode needs at least two values per channel (variance is degenerate)",
                ));
            }
            let (y, cache) = kernels::batch_norm_forward(x.data(), n, c, spatial, s.gamma.data(), s.beta.data(), eps, None);
            update_running_stats(
                s.running_mean.data_mut(),
                s.running_var.data_mut(),
                &cache.mean,
                &cache.var,
                s.momentum,
            );
            Tensor::new(x.shape().to_vec(), y)
        }
        BnMode::Eval => {
            let (y, _) = kernels::batch_norm_forward(
                x.data(),
                n,
                c,
                spatial,
                s.gamma.data(),
                s.beta.data(),
                eps,
                Some((s.running_mean.data(), s.running_var.data())),
            );
            Tensor::new(x.shape().to_vec(), y)
        }
    }
}

pub(crate) fn bn_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape("batch_norm", format!("expected N x C or N x C x H x W, got {:?}", x.shape()))),
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub(crate) fn linear_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, d_in) = x.dims2()?;
    let (d_out, w_in) = w.dims2()?;
    if w_in != d_in || b.shape() != [d_out] {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    Ok((n, d_in, d_out))
}

/// `x * w^T + b` row by row.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d_in, d_out) = linear_dims(x, w, b)?;
    Tensor::new([n, d_out], kernels::linear_forward(x.data(), n, d_in, w.data(), b.data(), d_out))
}

/// Per-channel spatial mean, `N x C x H x W -> N x C`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let s = h * w;
    if s == 0 {
        return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
    }
    let inv = T::from_f64(1.0 / s as f64);
    let data = x.data().chunks(s).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
    Tensor::new([n, c], data)
}

pub(crate) fn check_labels<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("softmax_cross_entropy", format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid("softmax_cross_entropy", format!("label {bad} outside [0, {k})")));
    }
    Ok((n, k))
}

/// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (n, k) = check_labels(logits, labels)?;
    let lsm = kernels::log_softmax_rows(logits.data(), n, k);
    let total: f64 = labels.iter().enumerate().map(|(i, &l)| -lsm[i * k + l].as_f64()).sum();
    Ok(T::from_f64(total / n as f64))
}

/// Rows scaled to unit Euclidean norm (zero rows are left unchanged).
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    let mut out = x.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v = T::from_f64(v.as_f64() / norm);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[2, 1, 1], &[1.0, 2.0]);
        let w = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        assert_eq!(conv2d(&x, &w, &b, 1, 0).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn conv_mixing_kernel() {
        let x = t(&[2, 1, 1], &[1.0, 2.0]);
        let w = t(&[2, 2, 1, 1], &[1.0, 1.0, 1.0, -1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        assert_eq!(conv2d(&x, &w, &b, 1, 0).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn conv_3x3_ones_padded() {
        let x = t(&[1, 3, 3], &[1.0; 9]);
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(y.data()[edge], 6.0);
        }
    }

    #[test]
    fn conv_output_size_with_stride() {
        let x = Tensor::<f64>::zeros([2, 3, 8, 5]);
        let w = Tensor::<f64>::zeros([4, 3, 3, 3]);
        let b = Tensor::<f64>::zeros([4]);
        assert_eq!(conv2d(&x, &w, &b, 2, 1).unwrap().shape(), &[2, 4, 4, 3]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros([3, 4, 4]);
        let w = Tensor::<f64>::zeros([2, 2, 1, 1]);
        let b = Tensor::<f64>::zeros([2]);
        let msg = conv2d(&x, &w, &b, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[3, 4, 4]") && msg.contains("[2, 2, 1, 1]"), "{msg}");
    }

    #[test]
    fn bn_two_values() {
        let x = t(&[2, 1], &[1.0, 3.0]);
        let mut s = BnState::<f64>::new(1);
        let y = batch_norm(&x, &mut s).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_abs_diff_eq!(y.data()[0], -expect, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[1], expect, epsilon = 1e-12);
        assert!((y.data()[0].abs() - 1.0).abs() < 1e-4);
        // running stats moved by momentum toward mean 2, var 1
        assert_abs_diff_eq!(s.running_mean.data()[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(s.running_var.data()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bn_eval_identity_stats() {
        let x = t(&[1, 2, 1, 2], &[0.5, -1.0, 2.0, 3.0]);
        let mut s = BnState::<f64>::new(2);
        s.mode = BnMode::Eval;
        let y = batch_norm(&x, &mut s).unwrap();
        let f = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_abs_diff_eq!(*a, b * f, epsilon = 1e-12);
        }
    }

    #[test]
    fn bn_zero_gamma_gives_beta() {
        let x = t(&[3, 2], &[1.0, 5.0, -2.0, 0.3, 7.0, 1.1]);
        let mut s = BnState::<f64>::new(2);
        s.gamma.fill(0.0);
        s.beta = t(&[2], &[0.25, -4.0]);
        let y = batch_norm(&x, &mut s).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.25, -4.0]);
        }
    }

    #[test]
    fn bn_rejects_single_element_in_train() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let mut s = BnState::<f64>::new(2);
        assert!(batch_norm(&x, &mut s).is_err());
        s.mode = BnMode::Eval;
        assert!(batch_norm(&x, &mut s).is_ok());
    }

    #[test]
    fn bn_train_output_is_standardized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..8 * 3 * 4).map(|_| rng.random_range(-5.0..9.0)).collect();
        let x = t(&[8, 3, 2, 2], &data);
        let mut s = BnState::<f64>::new(3);
        let y = batch_norm(&x, &mut s).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..8).flat_map(|i| y.data()[(i * 3 + c) * 4..][..4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&t(&[3], &[-1.0, -0.1, -7.0])).data().iter().all(|&v| v == 0.0));
        let pos = t(&[3], &[0.0, 0.1, 7.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn linear_cases() {
        let x = t(&[1, 2], &[1.0, 1.0]);
        let y = linear(&x, &t(&[1, 2], &[2.0, 3.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!(y.data(), &[6.0]);

        let x = t(&[2, 2], &[1.5, -2.0, 0.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &eye, &t(&[2], &[0.0, 0.0])).unwrap(), x);

        let y = linear(&x, &Tensor::zeros([3, 2]), &t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, &[1.0, 2.0, 3.0]);
        }
        assert!(linear(&x, &Tensor::zeros([3, 3]), &t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn gap_cases() {
        let y = global_avg_pool(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let y = global_avg_pool(&Tensor::full([2, 3, 4, 5], 0.75f64)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
        let x = t(&[2, 2, 1, 1], &[1.0, -2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), x.data());
    }

    #[test]
    fn cross_entropy_cases() {
        let l = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
        let l = softmax_cross_entropy(&t(&[1, 2], &[3.0f64.ln(), 0.0]), &[0]).unwrap();
        assert_abs_diff_eq!(l, -(0.75f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.287682, epsilon = 1e-6);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0] {
            let l = softmax_cross_entropy(&t(&[1, 3], &[margin, 0.0, 0.0]), &[0]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-3);
        assert!(softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2]).is_err());
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let l = softmax_cross_entropy(&t(&[1, 2], &[1e4, -1e4]), &[1]).unwrap();
        assert_abs_diff_eq!(l, 2e4, epsilon = 1e-6);
    }
}

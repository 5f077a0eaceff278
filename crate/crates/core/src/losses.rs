//! Identity classification loss, enhanced squared-difference loss, and their
//! sum.
//!
//! The squared-difference loss works per anchor `i` of a batch:
//!
//! * `d_ij` is the Euclidean distance between unnormalized features;
//! * positives (same label) are weighted by a softmax over their distances,
//!   negatives by a softmax over `neg_sign * d` (`+1` by default);
//! * `delta_i = sum_p w_p d_p - sum_n w_n d_n` and `phi(delta) = delta * |delta|`;
//! * the anchor contributes `softplus(phi(delta_i))` and the loss is the mean.
//!
//! `phi` squares the gap while keeping its sign, so for moderately violated
//! or nearly satisfied triplets the gradient is larger than that of a plain
//! soft-margin, and for well-separated ones it vanishes much faster.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::{sigmoid, softplus};
use crate::numerics::{softmax_cross_entropy, CustomOp, Scalar, Tape, Tensor, Var};

/// Pairwise Euclidean distances between the rows of `features` (`N x D`).
///
/// Squared distances are accumulated from explicit differences and clamped
/// at zero before the square root; the matrix is filled symmetrically.
pub fn distance_matrix<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = features.dims2()?;
    let f = features.data();
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let sq: f64 = (0..d).map(|k| (f[i * d + k].as_f64() - f[j * d + k].as_f64()).powi(2)).sum();
            let v = T::from_f64(sq.max(0.0).sqrt());
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Tensor::new([n, n], out)
}

/// Everything the squared-difference loss needs about one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletContext {
    /// `N x D`, unnormalized.
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub dist: Tensor<f64>,
    pub pos_mask: Vec<bool>,
    pub neg_mask: Vec<bool>,
}

impl TripletContext {
    /// Build masks and distances. Every anchor needs at least one positive
    /// and one negative.
    pub fn new<T: Scalar>(features: &Tensor<T>, labels: &[usize]) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if labels.len() != n {
            return Err(Error::shape("TripletContext", format!("{n} feature rows but {} labels", labels.len())));
        }
        if n < 2 {
            return Err(Error::invalid("TripletContext", "need at least two samples"));
        }
        let features = features.cast::<f64>();
        let dist = distance_matrix(&features)?;
        let mut pos_mask = vec![false; n * n];
        let mut neg_mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pos_mask[i * n + j] = labels[i] == labels[j];
                    neg_mask[i * n + j] = labels[i] != labels[j];
                }
            }
            let row = i * n..(i + 1) * n;
            if !pos_mask[row.clone()].iter().any(|&b| b) || !neg_mask[row].iter().any(|&b| b) {
                return Err(Error::invalid(
                    "sq_loss",
                    format!("anchor {i} (label {}) lacks a positive or a negative; batch violates the sampler contract", labels[i]),
                ));
            }
        }
        Ok(Self { features, labels: labels.to_vec(), dist, pos_mask, neg_mask })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Knobs for [`sq_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqLossOptions {
    /// Sign applied to negative distances inside their softmax: `+1`
    /// emphasises far negatives, `-1` near ones.
    pub neg_sign: f64,
    /// Negate the mean (`-(1/N) sum softplus`). Unbounded below; kept for
    /// reference only and never used in training.
    pub negated: bool,
}

impl Default for SqLossOptions {
    fn default() -> Self {
        Self { neg_sign: 1.0, negated: false }
    }
}

/// Softmax-weighted mean of `d` with weights `softmax(sign * d)`, and the
/// derivative of that mean with respect to each `d`.
fn weighted_mean(d: &[f64], sign: f64) -> (f64, Vec<f64>) {
    let m = d.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(sign * v));
    let e: Vec<f64> = d.iter().map(|&v| (sign * v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let w: Vec<f64> = e.iter().map(|v| v / z).collect();
    let mean: f64 = w.iter().zip(d).map(|(w, d)| w * d).sum();
    let grad = w.iter().zip(d).map(|(w, &d)| w * (1.0 + sign * (d - mean))).collect();
    (mean, grad)
}

/// `phi(delta)`: `delta^2` for positive gaps, `-delta^2` otherwise.
pub fn phi(delta: f64) -> f64 {
    delta * delta.abs()
}

/// `d/d delta softplus(phi(delta)) = sigmoid(phi(delta)) * 2|delta|`.
pub fn sq_anchor_gradient(delta: f64) -> f64 {
    sigmoid(phi(delta)) * 2.0 * delta.abs()
}

/// `d/d delta softplus(delta)`, the plain soft-margin counterpart.
pub fn softplus_gradient(delta: f64) -> f64 {
    sigmoid(delta)
}

struct AnchorTerms {
    delta: f64,
    /// `(j, d delta / d d_ij)` over positives and negatives.
    partials: Vec<(usize, f64)>,
}

fn anchor_terms(ctx: &TripletContext, i: usize, neg_sign: f64) -> AnchorTerms {
    let n = ctx.len();
    let dist = &ctx.dist.data()[i * n..(i + 1) * n];
    let pos: Vec<usize> = (0..n).filter(|&j| ctx.pos_mask[i * n + j]).collect();
    let neg: Vec<usize> = (0..n).filter(|&j| ctx.neg_mask[i * n + j]).collect();
    let dp: Vec<f64> = pos.iter().map(|&j| dist[j]).collect();
    let dn: Vec<f64> = neg.iter().map(|&j| dist[j]).collect();
    let (ap, gp) = weighted_mean(&dp, 1.0);
    let (an, gn) = weighted_mean(&dn, neg_sign);
    let mut partials: Vec<(usize, f64)> = pos.into_iter().zip(gp).collect();
    partials.extend(neg.into_iter().zip(gn.into_iter().map(|g| -g)));
    AnchorTerms { delta: ap - an, partials }
}

/// `delta` and loss term of a single anchor from its positive and negative
/// distances.
pub fn anchor_loss(pos: &[f64], neg: &[f64], opts: &SqLossOptions) -> (f64, f64) {
    let delta = weighted_mean(pos, 1.0).0 - weighted_mean(neg, opts.neg_sign).0;
    let l = softplus(phi(delta));
    (if opts.negated { -l } else { l }, delta)
}

/// Mean over anchors of `softplus(phi(delta_i))`, plus every `delta_i`.
pub fn sq_loss(ctx: &TripletContext, opts: &SqLossOptions) -> (f64, Vec<f64>) {
    let n = ctx.len();
    let deltas: Vec<f64> = (0..n).map(|i| anchor_terms(ctx, i, opts.neg_sign).delta).collect();
    let mean = deltas.iter().map(|&d| softplus(phi(d))).sum::<f64>() / n as f64;
    (if opts.negated { -mean } else { mean }, deltas)
}

/// Gradient of [`sq_loss`] with respect to the features, scaled by `upstream`.
pub fn sq_loss_backward(ctx: &TripletContext, opts: &SqLossOptions, upstream: f64) -> Tensor<f64> {
    let n = ctx.len();
    let d = ctx.features.shape()[1];
    let sign = if opts.negated { -1.0 } else { 1.0 };
    // g[i][j] = dL / d d_ij
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        let terms = anchor_terms(ctx, i, opts.neg_sign);
        let dl_ddelta = upstream * sign * sq_anchor_gradient(terms.delta) / n as f64;
        for (j, p) in terms.partials {
            g[i * n + j] += dl_ddelta * p;
        }
    }
    let f = ctx.features.data();
    let dist = ctx.dist.data();
    let mut df = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            let coef = g[i * n + j] + g[j * n + i];
            let dij = dist[i * n + j];
            if i == j || coef == 0.0 || dij <= 1e-12 {
                continue;
            }
            let s = coef / dij;
            for k in 0..d {
                df[i * d + k] += s * (f[i * d + k] - f[j * d + k]);
            }
        }
    }
    Tensor::new([n, d], df).expect("n x d")
}

struct SqLossOp {
    labels: Vec<usize>,
    opts: SqLossOptions,
}

impl<T: Scalar> CustomOp<T> for SqLossOp {
    fn name(&self) -> &'static str {
        "sq_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let ctx = TripletContext::new(inputs[0], &self.labels).expect("validated in forward");
        vec![Some(sq_loss_backward(&ctx, &self.opts, grad_out.item().as_f64()).cast())]
    }
}

/// Record the squared-difference loss of `features` on `tape`. Returns the
/// scalar node and each anchor's `delta`.
pub fn sq_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    labels: &[usize],
    opts: &SqLossOptions,
) -> Result<(Var, Vec<f64>)> {
    let ctx = TripletContext::new(tape.value(features), labels)?;
    let (loss, deltas) = sq_loss(&ctx, opts);
    let op = SqLossOp { labels: labels.to_vec(), opts: *opts };
    let v = tape.custom(&[features], Tensor::scalar(T::from_f64(loss)), Box::new(op))?;
    Ok((v, deltas))
}

/// Identity classification loss: mean cross-entropy over every sample of
/// the batch, whatever its modality.
pub fn id_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    softmax_cross_entropy(logits, labels).map(Scalar::as_f64)
}

/// Unweighted sum of the two losses.
pub fn total_loss(l_id: f64, l_sq: f64) -> Result<f64> {
    if !l_id.is_finite() || !l_sq.is_finite() {
        return Err(Error::NonFinite(format!("total_loss(l_id = {l_id}, l_sq = {l_sq})")));
    }
    Ok(l_id + l_sq)
}

/// Loss values of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_id: f64,
    pub l_sq: f64,
    pub l_total: f64,
    pub per_anchor_delta: Vec<f64>,
}

impl LossReport {
    pub fn mean_delta(&self) -> f64 {
        if self.per_anchor_delta.is_empty() {
            return 0.0;
        }
        self.per_anchor_delta.iter().sum::<f64>() / self.per_anchor_delta.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn feats(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new([rows.len(), d], rows.iter().flat_map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn distance_examples() {
        let f = feats(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert!(distance_matrix(&f).unwrap().data().iter().all(|&v| v == 0.0));
        let f = feats(&[&[0.0, 0.0], &[3.0, 4.0]]);
        assert_eq!(distance_matrix(&f).unwrap().data(), &[0.0, 5.0, 5.0, 0.0]);
    }

    #[test]
    fn context_requires_positive_and_negative() {
        let f = feats(&[&[0.0], &[1.0], &[2.0]]);
        assert!(TripletContext::new(&f, &[0, 0, 1]).is_err());
        assert!(TripletContext::new(&f, &[0, 0, 0]).is_err());
        let f = feats(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        assert!(TripletContext::new(&f, &[0, 0, 1, 1]).is_ok());
    }

    #[test]
    fn single_anchor_balanced_gives_ln2() {
        let (loss, delta) = anchor_loss(&[1.0], &[1.0], &SqLossOptions::default());
        assert_eq!(delta, 0.0);
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn equidistant_batch_gives_ln2() {
        // regular simplex: every pairwise distance is 1, so every delta is 0
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let f = feats(&[&[s, 0.0, 0.0, 0.0], &[0.0, s, 0.0, 0.0], &[0.0, 0.0, s, 0.0], &[0.0, 0.0, 0.0, s]]);
        let ctx = TripletContext::new(&f, &[0, 0, 1, 1]).unwrap();
        let (loss, deltas) = sq_loss(&ctx, &SqLossOptions::default());
        assert!(deltas.iter().all(|&d| d.abs() < 1e-12), "{deltas:?}");
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn positive_softmax_weights() {
        let (mean, _) = weighted_mean(&[1.0, 2.0], 1.0);
        let w1 = 1f64.exp() / (1f64.exp() + 2f64.exp());
        assert_abs_diff_eq!(w1, 0.268941, epsilon = 1e-6);
        assert_abs_diff_eq!(mean, 1.731059, epsilon = 1e-6);
    }

    #[test]
    fn easy_triplet_vanishes() {
        let loss = softplus(phi(-10.0));
        assert!(loss > 0.0 && loss < 1e-40);
    }

    #[test]
    fn negated_form_flips_sign() {
        let f = feats(&[&[0.0, 0.3], &[1.0, 0.0], &[0.2, 1.0], &[1.0, 1.4]]);
        let ctx = TripletContext::new(&f, &[0, 0, 1, 1]).unwrap();
        let (a, _) = sq_loss(&ctx, &SqLossOptions::default());
        let (b, _) = sq_loss(&ctx, &SqLossOptions { negated: true, ..Default::default() });
        assert_eq!(a, -b);
    }

    #[test]
    fn hard_triplet_gradient_points() {
        assert_abs_diff_eq!(sq_anchor_gradient(-0.5), 0.4378, epsilon = 1e-3);
        assert_abs_diff_eq!(softplus_gradient(-0.5), 0.3775, epsilon = 1e-3);
        assert_abs_diff_eq!(sq_anchor_gradient(-3.0), 0.00074, epsilon = 1e-3);
        assert_abs_diff_eq!(softplus_gradient(-3.0), 0.04743, epsilon = 1e-3);
        assert!(sq_anchor_gradient(-0.5) > softplus_gradient(-0.5));
        assert!(sq_anchor_gradient(-3.0) < softplus_gradient(-3.0));
    }

    #[test]
    fn id_loss_uniform() {
        let logits = Tensor::<f64>::zeros([3, 4]);
        assert_abs_diff_eq!(id_loss(&logits, &[0, 1, 3]).unwrap(), 4f64.ln(), epsilon = 1e-12);
        assert!(id_loss(&logits, &[4, 0, 0]).is_err());
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_loss(1.0, 0.5).unwrap(), 1.5);
        assert!(total_loss(f64::NAN, 0.5).is_err());
        assert!(total_loss(1.0, f64::INFINITY).is_err());
    }
}

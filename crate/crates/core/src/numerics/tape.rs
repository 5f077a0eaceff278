//! Reverse-mode differentiation over the fixed op set.
//!
//! A [`Tape`] records every forward op with the values it needs for its
//! backward rule. [`Tape::backward`] walks the records in reverse and
//! returns the gradient of a scalar node with respect to every parameter
//! leaf. Parameters referenced more than once (shared weights) map to a
//! single leaf, so contributions from every use accumulate.

use std::collections::HashMap;

use super::kernels::{self, BnCache, ConvGeom};
use super::ops::{bn_dims, check_labels, conv_geom, linear_dims};
use super::param::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for an op defined outside this module.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the output gradient. `None` marks an
    /// input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, b: Var, n: usize, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, n: usize, c: usize, s: usize, cache: BnCache<T>, train: bool },
    Relu(Var),
    Linear { x: Var, w: Var, b: Var, n: usize, d_in: usize, d_out: usize },
    GlobalAvgPool { x: Var, s: usize },
    Concat(Vec<Var>),
    Add(Var, Var),
    Attention { theta: Var, phi: Var, g: Var, n: usize, c: usize, s: usize, attn: Vec<T> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, log_probs: Vec<T> },
    Sum(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Batch statistics produced by a train-mode batch-norm record.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name(&op).to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Record a constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a stored parameter. Repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.value(id).clone(), op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, geom) = conv_geom(xv, self.value(w), self.value(b), stride, pad)?;
        let (ho, wo) = geom.out_hw();
        let y = kernels::conv2d_forward(xv.data(), n, &geom, self.value(w).data(), self.value(b).data());
        let y = Tensor::new([n, geom.c_out, ho, wo], y)?;
        self.push(y, Op::Conv2d { x, w, b, n, geom })
    }

    /// Batch norm. With `running` given (eval mode) the output is normalized
    /// by those statistics and `None` is returned for the batch stats.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        let (n, c, s) = bn_dims(xv)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm", format!("input {:?} vs {} BN channels", xv.shape(), self.value(gamma).numel())));
        }
        let train = running.is_none();
        if train && n * s < 2 {
            return Err(Error::invalid("batch_norm", "train mode needs at least two values per channel (variance is degenerate)"));
        }
        let (y, cache) = kernels::batch_norm_forward(
            xv.data(),
            n,
            c,
            s,
            self.value(gamma).data(),
            self.value(beta).data(),
            T::from_f64(eps),
            running.map(|(m, v)| (m.data(), v.data())),
        );
        let y = Tensor::new(xv.shape().to_vec(), y)?;
        let stats = train.then(|| BatchStats { mean: cache.mean.clone(), var: cache.var.clone() });
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, n, c, s, cache, train })?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = super::ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d_in, d_out) = linear_dims(self.value(x), self.value(w), self.value(b))?;
        let y = kernels::linear_forward(self.value(x).data(), n, d_in, self.value(w).data(), self.value(b).data(), d_out);
        self.push(Tensor::new([n, d_out], y)?, Op::Linear { x, w, b, n, d_in, d_out })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = super::ops::global_avg_pool(self.value(x))?;
        let (_, _, h, w) = self.value(x).dims4()?;
        self.push(y, Op::GlobalAvgPool { x, s: h * w })
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_rows(&values)?;
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut y = av.clone();
        y.add_assign(bv);
        self.push(y, Op::Add(a, b))
    }

    /// Non-local attention: for each image, `y = g * softmax_rows(theta^T phi)^T`
    /// over all spatial positions. Inputs are `N x C x H x W`.
    pub fn attention(&mut self, theta: Var, phi: Var, g: Var) -> Result<Var> {
        let shape = self.value(theta).shape().to_vec();
        if self.value(phi).shape() != shape.as_slice() || self.value(g).shape() != shape.as_slice() {
            return Err(Error::shape("attention", "theta, phi and g must share a shape"));
        }
        let (n, c, h, w) = self.value(theta).dims4()?;
        let s = h * w;
        let len = c * s;
        let mut y = Vec::with_capacity(n * len);
        let mut attn = Vec::with_capacity(n * s * s);
        for i in 0..n {
            let r = i * len..(i + 1) * len;
            let (yi, ai) = kernels::attention_forward(
                &self.value(theta).data()[r.clone()],
                &self.value(phi).data()[r.clone()],
                &self.value(g).data()[r],
                c,
                s,
            );
            y.extend(yi);
            attn.extend(ai);
        }
        self.push(Tensor::new(shape, y)?, Op::Attention { theta, phi, g, n, c, s, attn })
    }

    /// Mean cross-entropy of `labels` under row-softmax of `logits`; scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = check_labels(self.value(logits), labels)?;
        let log_probs = kernels::log_softmax_rows(self.value(logits).data(), n, k);
        let total: f64 = labels.iter().enumerate().map(|(i, &l)| -log_probs[i * k + l].as_f64()).sum();
        let y = Tensor::scalar(T::from_f64(total / n as f64));
        self.push(y, Op::SoftmaxCe { logits, labels: labels.to_vec(), log_probs })
    }

    /// Sum of all elements; scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Record an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let acc = |v: Var, g: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, w, b, n, geom } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    let mut dw = Tensor::zeros(wv.shape().to_vec());
                    let mut db = Tensor::zeros([geom.c_out]);
                    kernels::conv2d_backward(
                        xv.data(),
                        *n,
                        geom,
                        wv.data(),
                        dy.data(),
                        Some(dx.data_mut()),
                        dw.data_mut(),
                        db.data_mut(),
                    );
                    acc(*x, dx, &mut grads);
                    acc(*w, dw, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::BatchNorm { x, gamma, beta, n, c, s, cache, train } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    let mut dg = Tensor::zeros([*c]);
                    let mut db = Tensor::zeros([*c]);
                    kernels::batch_norm_backward(
                        xv.data(),
                        *n,
                        *c,
                        *s,
                        self.value(*gamma).data(),
                        cache,
                        *train,
                        dy.data(),
                        dx.data_mut(),
                        dg.data_mut(),
                        db.data_mut(),
                    );
                    acc(*x, dx, &mut grads);
                    acc(*gamma, dg, &mut grads);
                    acc(*beta, db, &mut grads);
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::Linear { x, w, b, n, d_in, d_out } => {
                    let mut dx = Tensor::zeros([*n, *d_in]);
                    let mut dw = Tensor::zeros([*d_out, *d_in]);
                    let mut db = Tensor::zeros([*d_out]);
                    kernels::linear_backward(
                        self.value(*x).data(),
                        *n,
                        *d_in,
                        self.value(*w).data(),
                        *d_out,
                        dy.data(),
                        Some(dx.data_mut()),
                        dw.data_mut(),
                        db.data_mut(),
                    );
                    acc(*x, dx, &mut grads);
                    acc(*w, dw, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::GlobalAvgPool { x, s } => {
                    let inv = T::from_f64(1.0 / *s as f64);
                    let data = dy.data().iter().flat_map(|&d| std::iter::repeat_n(d * inv, *s)).collect();
                    acc(*x, Tensor::new(self.value(*x).shape().to_vec(), data)?, &mut grads);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let len = self.value(p).numel();
                        let g = Tensor::new(shape, dy.data()[offset..offset + len].to_vec())?;
                        offset += len;
                        acc(p, g, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, dy.clone(), &mut grads);
                    acc(*b, dy, &mut grads);
                }
                Op::Attention { theta, phi, g, n, c, s, attn } => {
                    let shape = self.value(*theta).shape().to_vec();
                    let mut dt = Tensor::zeros(shape.clone());
                    let mut dp = Tensor::zeros(shape.clone());
                    let mut dg = Tensor::zeros(shape);
                    let len = c * s;
                    for i in 0..*n {
                        let r = i * len..(i + 1) * len;
                        kernels::attention_backward(
                            &self.value(*theta).data()[r.clone()],
                            &self.value(*phi).data()[r.clone()],
                            &self.value(*g).data()[r.clone()],
                            &attn[i * s * s..(i + 1) * s * s],
                            *c,
                            *s,
                            &dy.data()[r.clone()],
                            &mut dt.data_mut()[r.clone()],
                            &mut dp.data_mut()[r.clone()],
                            &mut dg.data_mut()[r],
                        );
                    }
                    acc(*theta, dt, &mut grads);
                    acc(*phi, dp, &mut grads);
                    acc(*g, dg, &mut grads);
                }
                Op::SoftmaxCe { logits, labels, log_probs } => {
                    let (n, k) = self.value(*logits).dims2()?;
                    let scale = dy.item() / T::from_f64(n as f64);
                    let mut dl: Vec<T> = log_probs.iter().map(|&lp| lp.exp() * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dl[i * k + l] = dl[i * k + l] - scale;
                    }
                    acc(*logits, Tensor::new([n, k], dl)?, &mut grads);
                }
                Op::Sum(x) => {
                    acc(*x, Tensor::full(self.value(*x).shape().to_vec(), dy.item()), &mut grads);
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gs = op.backward(&values, &dy);
                    for (&v, g) in inputs.iter().zip(gs) {
                        if let Some(g) = g {
                            acc(v, g, &mut grads);
                        }
                    }
                }
            }
        }

        let mut params = Vec::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads[v.0].take() {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter #{}", id.0)));
                }
                params.push((id, g));
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { params })
    }
}

fn op_name<T: Scalar>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "input",
        Op::Param => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Relu(_) => "relu",
        Op::Linear { .. } => "linear",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::Concat(_) => "concat",
        Op::Add(..) => "add",
        Op::Attention { .. } => "attention",
        Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        Op::Sum(_) => "sum",
        Op::Custom { op, .. } => op.name(),
    }
}

/// Parameter gradients from one backward sweep, ordered by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar> {
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    /// Add into the `grad` slots of trainable parameters.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            let p = store.get_mut(*id);
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::param::ParamKind;

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64([1, 1, 1, 1], &[2.0]).unwrap(), ParamKind::Weight).unwrap();
        let b = store.add("b", Tensor::from_f64([1], &[0.0]).unwrap(), ParamKind::NoDecay).unwrap();
        let mut tape = Tape::new();
        let x1 = tape.input(Tensor::from_f64([1, 1, 1, 1], &[3.0]).unwrap()).unwrap();
        let x2 = tape.input(Tensor::from_f64([1, 1, 1, 1], &[5.0]).unwrap()).unwrap();
        let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
        assert_eq!(wv, tape.param(&store, w));
        let y1 = tape.conv2d(x1, wv, bv, 1, 0).unwrap();
        let y2 = tape.conv2d(x2, wv, bv, 1, 0).unwrap();
        let y = tape.add(y1, y2).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[8.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros([2])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.input(Tensor::full([1], f64::NAN)).is_err());
    }
}

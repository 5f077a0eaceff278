//! Parameterized layers shared by the color transform and the backbone.

use rand::Rng;

use crate::error::Result;
use crate::numerics::ops::update_running_stats;
use crate::numerics::{BatchStats, BnMode, ParamId, ParamKind, ParamStore, Scalar, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM};

/// One forward pass over a model: the tape, the parameters it reads, the
/// batch-norm mode, and the batch statistics to fold in afterwards.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: BnMode,
    pending: Vec<(Bn, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: BnMode) -> Self {
        Self { tape, store, mode, pending: Vec::new() }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// Running-statistic updates collected in train mode.
    pub fn into_stat_updates(self) -> Vec<(Bn, BatchStats<T>)> {
        self.pending
    }
}

/// Apply the running-statistic updates of a train-mode pass.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[(Bn, BatchStats<T>)]) {
    for (bn, stats) in updates {
        let mut mean = store.value(bn.running_mean).clone();
        let mut var = store.value(bn.running_var).clone();
        update_running_stats(mean.data_mut(), var.data_mut(), &stats.mean, &stats.var, bn.momentum);
        *store.value_mut(bn.running_mean) = mean;
        *store.value_mut(bn.running_var) = var;
    }
}

fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Weights uniform in `(-gain * sqrt(1 / fan_in), +...)`, bias zero.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = gain * (1.0 / (c_in * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[c_out, c_in, k, k], bound, rng), ParamKind::Weight)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]), ParamKind::NoDecay)?;
        Ok(Self { weight, bias, stride, pad: (k - 1) / 2 })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch-norm layer backed by four store entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl Bn {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], T::one()), ParamKind::NoDecay)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), ParamKind::NoDecay)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full([channels], T::one()), ParamKind::Buffer)?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        match f.mode {
            BnMode::Train => {
                let (y, stats) = f.tape.batch_norm(x, g, b, self.eps, None)?;
                if let Some(stats) = stats {
                    f.pending.push((*self, stats));
                }
                Ok(y)
            }
            BnMode::Eval => {
                let store = f.store;
                let running = (store.value(self.running_mean), store.value(self.running_var));
                Ok(f.tape.batch_norm(x, g, b, self.eps, Some(running))?.0)
            }
        }
    }
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = gain * (1.0 / d_in as f64).sqrt();
        Ok(Self {
            weight: store.add(format!("{name}.weight"), uniform(&[d_out, d_in], bound, rng), ParamKind::Weight)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d_out]), ParamKind::NoDecay)?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.linear(x, w, b)
    }
}

/// Conv 3x3, batch norm, ReLU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: Bn,
}

impl ConvBlock {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::init(store, &format!("{name}.conv"), c_in, c_out, 3, stride, 6f64.sqrt(), rng)?,
            bn: Bn::init(store, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        f.tape.relu(y)
    }
}

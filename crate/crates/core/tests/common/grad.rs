//! Finite-difference checks of every differentiable op and of the full
//! training graph. Each case returns its worst relative error.

use std::time::{Duration, Instant};

use csl::backbone::{BackboneConfig, BackboneParams};
use csl::color_aug::Modality;
use csl::losses::{sq_loss_on_tape, SqLossOptions};
use csl::nn::Forward;
use csl::numerics::{grad_check, BnMode, GradCheckOptions, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use csl::pct::PctParams;
use csl::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-4;
pub const GRAPH_TOL: f64 = 1e-3;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn images(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    random(&[n, 3, h, w], 0.0, 1.0, seed)
}

fn opts() -> GradCheckOptions {
    GradCheckOptions { step: 1e-4, ..Default::default() }
}

/// Store holding the op's inputs plus a random linear head, so the checked
/// loss has non-uniform upstream gradients.
struct Probe {
    store: ParamStore<f64>,
    head_w: ParamId,
    head_b: ParamId,
    labels: Vec<usize>,
}

impl Probe {
    fn new(features: usize, rows: usize) -> Self {
        let mut store = ParamStore::new();
        let head_w = store.add("head.w", random(&[3, features], -1.0, 1.0, 100), ParamKind::Weight).unwrap();
        let head_b = store.add("head.b", random(&[3], -0.5, 0.5, 101), ParamKind::NoDecay).unwrap();
        Self { store, head_w, head_b, labels: (0..rows).map(|i| (i * 7 + 1) % 3).collect() }
    }

    fn input(&mut self, name: &str, value: Tensor<f64>) -> ParamId {
        self.store.add(name, value, ParamKind::Weight).unwrap()
    }

    /// Cross-entropy of a linear head over `y` (pooled first when 4-D).
    fn loss(&self, tape: &mut Tape<f64>, s: &ParamStore<f64>, y: Var) -> Result<Var> {
        let y = if tape.value(y).shape().len() == 4 { tape.global_avg_pool(y)? } else { y };
        let w = tape.param(s, self.head_w);
        let b = tape.param(s, self.head_b);
        let logits = tape.linear(y, w, b)?;
        tape.softmax_cross_entropy(logits, &self.labels)
    }

    fn check<F>(&self, f: F) -> f64
    where
        F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        grad_check(&self.store, &opts(), |s, tape| {
            let y = f(tape, s)?;
            self.loss(tape, s, y)
        })
        .unwrap()
        .max_rel_err
    }
}

pub fn linear_and_cross_entropy() -> f64 {
    let mut p = Probe::new(5, 4);
    let x = p.input("x", random(&[4, 5], -1.0, 1.0, 1));
    p.check(|tape, s| Ok(tape.param(s, x)))
}

pub fn conv2d_strides_and_padding() -> f64 {
    let mut worst = 0.0f64;
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 3), (1, 0, 1)] {
        let mut p = Probe::new(4, 2);
        let x = p.input("x", random(&[2, 3, 7, 6], -1.0, 1.0, 2));
        let w = p.input("w", random(&[4, 3, k, k], -0.5, 0.5, 3));
        let b = p.input("b", random(&[4], -0.5, 0.5, 4));
        worst = worst.max(p.check(|tape, s| {
            let (x, w, b) = (tape.param(s, x), tape.param(s, w), tape.param(s, b));
            tape.conv2d(x, w, b, stride, pad)
        }));
    }
    worst
}

pub fn batch_norm_train_and_eval() -> f64 {
    let mut worst = 0.0f64;
    for train in [true, false] {
        let mut p = Probe::new(3, 4);
        let x = p.input("x", random(&[4, 3, 2, 3], -2.0, 2.0, 5));
        let g = p.input("gamma", random(&[3], 0.5, 1.5, 6));
        let b = p.input("beta", random(&[3], -0.5, 0.5, 7));
        let mean = random(&[3], -0.3, 0.3, 8);
        let var = random(&[3], 0.5, 2.0, 9);
        worst = worst.max(p.check(|tape, s| {
            let (x, g, b) = (tape.param(s, x), tape.param(s, g), tape.param(s, b));
            let running = (!train).then_some((&mean, &var));
            Ok(tape.batch_norm(x, g, b, 1e-5, running)?.0)
        }));
    }
    worst
}

pub fn relu_away_from_the_kink() -> f64 {
    let mut p = Probe::new(4, 3);
    let mut v = random(&[3, 4], 0.05, 1.0, 10);
    for (i, e) in v.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *e = -*e;
        }
    }
    let x = p.input("x", v);
    p.check(|tape, s| {
        let x = tape.param(s, x);
        tape.relu(x)
    })
}

pub fn pool_concat_add() -> f64 {
    let mut p = Probe::new(2, 5);
    let a = p.input("a", random(&[2, 2, 3, 3], -1.0, 1.0, 11));
    let b = p.input("b", random(&[3, 2, 3, 3], -1.0, 1.0, 12));
    let c = p.input("c", random(&[5, 2, 3, 3], -1.0, 1.0, 13));
    p.check(|tape, s| {
        let (a, b, c) = (tape.param(s, a), tape.param(s, b), tape.param(s, c));
        let ab = tape.concat(&[a, b])?;
        tape.add(ab, c)
    })
}

pub fn attention() -> f64 {
    let mut p = Probe::new(2, 2);
    let t = p.input("theta", random(&[2, 2, 3, 2], -1.0, 1.0, 14));
    let ph = p.input("phi", random(&[2, 2, 3, 2], -1.0, 1.0, 15));
    let g = p.input("g", random(&[2, 2, 3, 2], -1.0, 1.0, 16));
    p.check(|tape, s| {
        let (t, ph, g) = (tape.param(s, t), tape.param(s, ph), tape.param(s, g));
        tape.attention(t, ph, g)
    })
}

pub fn sum_of_products() -> f64 {
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[3, 4], -1.0, 1.0, 17), ParamKind::Weight).unwrap();
    let w = store.add("w", random(&[2, 4], -1.0, 1.0, 18), ParamKind::Weight).unwrap();
    let b = store.add("b", random(&[2], -1.0, 1.0, 19), ParamKind::Weight).unwrap();
    grad_check(&store, &opts(), |s, tape| {
        let (x, w, b) = (tape.param(s, x), tape.param(s, w), tape.param(s, b));
        let y = tape.linear(x, w, b)?;
        let r = tape.relu(y)?;
        let z = tape.add(r, y)?;
        tape.sum(z)
    })
    .unwrap()
    .max_rel_err
}

pub fn squared_difference_loss_both_weightings() -> f64 {
    let labels = [0, 0, 1, 1, 2, 2, 0, 1];
    let mut worst = 0.0f64;
    for neg_sign in [1.0, -1.0] {
        for negated in [false, true] {
            let mut store = ParamStore::new();
            let x = store.add("features", random(&[8, 4], -1.0, 1.0, 20), ParamKind::Weight).unwrap();
            let report = grad_check(&store, &opts(), |s, tape| {
                let x = tape.param(s, x);
                Ok(sq_loss_on_tape(tape, x, &labels, &SqLossOptions { neg_sign, negated })?.0)
            })
            .unwrap();
            worst = worst.max(report.max_rel_err);
        }
    }
    worst
}

pub fn color_transform_both_streams() -> f64 {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pct = PctParams::init(&mut store, 4, true, &mut rng).unwrap();
    let head_w = store.add("head.w", random(&[3, 3], -1.0, 1.0, 21), ParamKind::Weight).unwrap();
    let head_b = store.add("head.b", random(&[3], -1.0, 1.0, 22), ParamKind::Weight).unwrap();
    let rgb = images(3, 3, 4, 23);
    let ir = images(3, 3, 4, 24);
    grad_check(&store, &opts(), |s, tape| {
        let xr = tape.input(rgb.clone())?;
        let xi = tape.input(ir.clone())?;
        let mut f = Forward::new(tape, s, BnMode::Train);
        let yr = pct.forward(&mut f, xr, Modality::Rgb)?;
        let yi = pct.forward(&mut f, xi, Modality::Ir)?;
        let y = tape.concat(&[yr, yi])?;
        let pooled = tape.global_avg_pool(y)?;
        let (w, b) = (tape.param(s, head_w), tape.param(s, head_b));
        let logits = tape.linear(pooled, w, b)?;
        tape.softmax_cross_entropy(logits, &[0, 1, 2, 2, 1, 0])
    })
    .unwrap()
    .max_rel_err
}

pub const OP_CASES: [(&str, fn() -> f64); 9] = [
    ("linear and cross-entropy", linear_and_cross_entropy),
    ("conv2d", conv2d_strides_and_padding),
    ("batch norm", batch_norm_train_and_eval),
    ("relu", relu_away_from_the_kink),
    ("pool, concat, add", pool_concat_add),
    ("attention", attention),
    ("sum of products", sum_of_products),
    ("squared-difference loss", squared_difference_loss_both_weightings),
    ("color transform", color_transform_both_streams),
];

/// Color transform, two-stream backbone with the non-local block, identity
/// and metric losses, all checked at once.
pub fn full_graph() -> (f64, Duration) {
    let started = Instant::now();
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pct = PctParams::init(&mut store, 3, true, &mut rng).unwrap();
    let cfg = BackboneConfig { widths: [4, 4, 6, 6], strides: [2, 1, 2, 1], emb_dim: 5, nonlocal: true };
    let bb = BackboneParams::init(&mut store, &cfg, 3, true, &mut rng).unwrap();
    // give the non-local residual a nonzero path so its parameters get gradient
    let wz = bb.nonlocal.unwrap().w_z.weight;
    let shape = store.value(wz).shape().to_vec();
    let n: usize = shape.iter().product();
    *store.value_mut(wz) = Tensor::new(shape, (0..n).map(|i| 0.3 * ((i as f64) * 0.7).sin()).collect()).unwrap();
    let rgb = images(4, 12, 12, 1);
    let ir = images(4, 12, 12, 2);
    let labels = [0, 0, 1, 2, 0, 1, 1, 2];
    // a smaller step keeps clear of ReLU kinks in the deep trunk; conv biases
    // feeding batch norm have exactly zero gradient, so their finite-difference
    // rounding noise is measured against an absolute floor
    let graph_opts = GradCheckOptions { step: 1e-5, denom_floor: 1e-7, ..Default::default() };
    let report = grad_check(&store, &graph_opts, |s, tape| {
        let xr = tape.input(rgb.clone())?;
        let xi = tape.input(ir.clone())?;
        let mut f = Forward::new(tape, s, BnMode::Train);
        let pr = pct.forward(&mut f, xr, Modality::Rgb)?;
        let pi = pct.forward(&mut f, xi, Modality::Ir)?;
        let (feats, logits) = bb.embed_streams(&mut f, &[(pr, Modality::Rgb), (pi, Modality::Ir)])?;
        let id = tape.softmax_cross_entropy(logits, &labels)?;
        let (sq, _) = sq_loss_on_tape(tape, feats, &labels, &SqLossOptions::default())?;
        tape.add(id, sq)
    })
    .unwrap();
    (report.max_rel_err, started.elapsed())
}

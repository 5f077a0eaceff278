//! Training loop, evaluation driver and the ablation runner.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::color_aug::{apply_policy, random_crop, AugPolicy, AugVariant, Image, Modality};
use crate::data::{Dataset, PkSampler, Regime};
use crate::error::{Error, Result};
use crate::eval::{build_query_gallery, cmc_map, Direction, ItemMeta, RetrievalReport};
use crate::losses::{sq_loss_on_tape, total_loss, LossReport, SqLossOptions};
use crate::nn::{apply_stat_updates, Forward};
use crate::numerics::{checkpoint, l2_normalize_rows, BnMode, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::pct::{PctParams, DEFAULT_HIDDEN};

/// Rows of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "cr")]
    Cr,
    #[serde(rename = "cs")]
    Cs,
    #[serde(rename = "gray")]
    Gray,
    #[serde(rename = "ica")]
    Ica,
    #[serde(rename = "pct")]
    Pct,
    #[serde(rename = "ica+pct")]
    IcaPct,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Baseline, Variant::Cr, Variant::Cs, Variant::Gray, Variant::Ica, Variant::Pct, Variant::IcaPct];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cr => "cr",
            Variant::Cs => "cs",
            Variant::Gray => "gray",
            Variant::Ica => "ica",
            Variant::Pct => "pct",
            Variant::IcaPct => "ica+pct",
        }
    }

    /// Augmentation producing the RGB twins, if any.
    pub fn augmentation(self) -> Option<AugVariant> {
        match self {
            Variant::Cr => Some(AugVariant::CrOnly),
            Variant::Cs => Some(AugVariant::CsOnly),
            Variant::Gray => Some(AugVariant::GrayOnly),
            Variant::Ica | Variant::IcaPct => Some(AugVariant::Ica),
            Variant::Baseline | Variant::Pct => None,
        }
    }

    pub fn uses_pct(self) -> bool {
        matches!(self, Variant::Pct | Variant::IcaPct)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().trim_start_matches('+').to_ascii_lowercase().replace("gray-scale", "gray");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == key)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (baseline, cr, cs, gray, ica, pct, ica+pct)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Regime,
    pub variant: Variant,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exempt biases and batch-norm parameters from weight decay.
    pub decay_exclude_bn_bias: bool,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub nonlocal: bool,
    /// Sign on the negative-side softmax weights of the metric loss.
    pub wrt_neg_sign: f64,
    pub pct_hidden: usize,
    pub emb_dim: usize,
    /// Zero padding of the random crop; 0 disables it.
    pub crop_pad: usize,
    pub p_apply: f64,
    pub p_cr_given_apply: f64,
    /// Feed only the augmented twins instead of originals plus twins.
    pub replace_with_twin: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Regime::Vi,
            variant: Variant::IcaPct,
            epochs: 20,
            steps_per_epoch: 100,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_exclude_bn_bias: true,
            warmup_epochs: 5,
            decay_epochs: vec![10, 15],
            decay_factor: 0.1,
            p: 4,
            k: 4,
            seed: 0,
            nonlocal: false,
            wrt_neg_sign: 1.0,
            pct_hidden: DEFAULT_HIDDEN,
            emb_dim: 64,
            crop_pad: 2,
            p_apply: 0.5,
            p_cr_given_apply: 0.5,
            replace_with_twin: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("epochs and steps_per_epoch must be positive".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) || self.decay_epochs.iter().any(|&e| e >= self.epochs) {
            return bad(format!("decay_epochs {:?} must be strictly increasing and < epochs ({})", self.decay_epochs, self.epochs));
        }
        if self.wrt_neg_sign != 1.0 && self.wrt_neg_sign != -1.0 {
            return bad(format!("wrt_neg_sign must be +1 or -1, got {}", self.wrt_neg_sign));
        }
        if self.p < 2 || self.k == 0 {
            return bad(format!("need P >= 2 and K >= 1 (P = {}, K = {})", self.p, self.k));
        }
        if self.mode == Regime::Cc && self.k < 2 {
            return bad("cloth-change batches need K >= 2".into());
        }
        if !(self.lr0 >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0 && self.decay_factor > 0.0) {
            return bad("lr0, momentum and weight_decay must be non-negative, decay_factor positive".into());
        }
        if self.pct_hidden == 0 || self.emb_dim == 0 {
            return bad("pct_hidden and emb_dim must be positive".into());
        }
        self.aug_policy().validate()
    }

    pub fn aug_policy(&self) -> AugPolicy {
        AugPolicy {
            p_apply: self.p_apply,
            p_cr_given_apply: self.p_cr_given_apply,
            rng_seed: self.seed,
            variant: self.variant.augmentation().unwrap_or(AugVariant::Ica),
        }
    }

    pub fn loss_options(&self) -> SqLossOptions {
        SqLossOptions { neg_sign: self.wrt_neg_sign, ..SqLossOptions::default() }
    }

    /// Evaluation directions of this mode.
    pub fn directions(&self) -> Vec<Direction> {
        match self.mode {
            Regime::Vi => vec![Direction::NirToRgb, Direction::RgbToNir],
            Regime::Cc => vec![Direction::ClothChange],
        }
    }
}

/// Learning rate of `epoch`: linear warm-up, then step decay.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.lr0 * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let passed = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.lr0 * cfg.decay_factor.powi(passed as i32)
}

/// Architecture description stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    /// Hidden width of the color transform; absent when it is not used.
    pub pct_hidden: Option<usize>,
    pub num_classes: usize,
    pub with_ir: bool,
}

impl ModelSpec {
    pub fn for_training(cfg: &TrainConfig, num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig { nonlocal: cfg.nonlocal, emb_dim: cfg.emb_dim, ..BackboneConfig::default() },
            pct_hidden: cfg.variant.uses_pct().then_some(cfg.pct_hidden),
            num_classes,
            with_ir: cfg.mode == Regime::Vi,
        }
    }
}

pub const MODEL_SPEC_FILE: &str = "model.json";

/// Color transform, backbone and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore<f32>,
    pub pct: Option<PctParams>,
    pub backbone: BackboneParams,
}

impl Model {
    /// The color transform and the backbone draw from separate generators,
    /// so variants with and without it start from the same backbone.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let pct = match spec.pct_hidden {
            Some(h) => Some(PctParams::init(&mut store, h, spec.with_ir, &mut stream_rng(seed, 10))?),
            None => None,
        };
        let backbone = BackboneParams::init(&mut store, &spec.backbone, spec.num_classes, spec.with_ir, &mut stream_rng(seed, 11))?;
        Ok(Self { spec: spec.clone(), store, pct, backbone })
    }

    /// Forward the given stream batches; rows of the outputs follow the
    /// order of `inputs`.
    pub fn forward(&self, f: &mut Forward<'_, f32>, inputs: &[(Var, Modality)]) -> Result<(Var, Var)> {
        let mut xs = Vec::with_capacity(inputs.len());
        for &(x, stream) in inputs {
            let x = match &self.pct {
                Some(p) => p.forward(f, x, stream)?,
                None => x,
            };
            xs.push((x, stream));
        }
        self.backbone.embed_streams(f, &xs)
    }

    /// Eval-mode L2-normalized embeddings, one row per image. All images
    /// must share a modality.
    pub fn embed_images(&self, images: &[&Image]) -> Result<Tensor<f32>> {
        let Some(first) = images.first() else {
            return Err(Error::invalid("embed_images", "no images"));
        };
        let stream = first.modality;
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            if chunk.iter().any(|i| i.modality != stream) {
                return Err(Error::invalid("embed_images", "mixed modalities in one call"));
            }
            let mut tape = Tape::new();
            let x = tape.input(stack(chunk)?)?;
            let mut f = Forward::new(&mut tape, &self.store, BnMode::Eval);
            let (feats, _) = self.forward(&mut f, &[(x, stream)])?;
            rows.push(l2_normalize_rows(tape.value(feats))?);
        }
        Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.store, dir)?;
        let path = dir.join(MODEL_SPEC_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.spec)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_SPEC_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let spec: ModelSpec = serde_json::from_str(&text)?;
        let mut model = Model::init(&spec, 0)?;
        checkpoint::load_into(&mut model.store, dir)?;
        Ok(model)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stack `3 x H x W` images into `N x 3 x H x W`.
pub fn stack(images: &[&Image]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("stack", "no images"));
    };
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape("stack", format!("{}x{} vs {}x{}", img.height(), img.width(), h, w)));
        }
        data.extend_from_slice(img.pixels.data());
    }
    Tensor::new([images.len(), 3, h, w], data)
}

/// SGD with momentum and decoupled-from-BN weight decay.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Option<Tensor<f32>>>,
}

impl Sgd {
    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &crate::numerics::Gradients<f32>, lr: f64, cfg: &TrainConfig) {
        let (lr, mom) = (lr as f32, cfg.momentum as f32);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if !p.trainable || p.kind == ParamKind::Buffer {
                continue;
            }
            let wd = match p.kind {
                ParamKind::NoDecay if cfg.decay_exclude_bn_bias => 0.0,
                _ => cfg.weight_decay as f32,
            };
            if self.velocity.len() <= id.index() {
                self.velocity.resize(id.index() + 1, None);
            }
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let w = p.value.data_mut();
            for ((w, v), &g) in w.iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = mom * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
    }
}

/// Random generators consumed by a training step.
#[derive(Clone, Debug)]
pub struct StepRngs {
    pub crop: ChaCha8Rng,
    pub aug: ChaCha8Rng,
}

impl StepRngs {
    pub fn new(seed: u64) -> Self {
        Self { crop: stream_rng(seed, 2), aug: stream_rng(seed, 3) }
    }
}

/// One optimization step on `batch`.
///
/// RGB rows are the cropped originals followed by their augmented twins
/// (only the twins with `replace_with_twin`); IR rows follow. Everything
/// shares one metric loss and one identity loss.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &crate::data::Batch,
    cfg: &TrainConfig,
    lr: f64,
    rngs: &mut StepRngs,
) -> Result<LossReport> {
    let mut rgb: Vec<Image> = batch.rgb.iter().map(|i| random_crop(i, cfg.crop_pad, &mut rngs.crop)).collect::<Result<_>>()?;
    let mut rgb_labels = batch.rgb_labels.clone();
    if cfg.variant.augmentation().is_some() {
        let pol = cfg.aug_policy();
        let twins: Vec<Image> = rgb.iter().map(|i| apply_policy(i, &pol, &mut rngs.aug)).collect::<Result<_>>()?;
        if cfg.replace_with_twin {
            rgb = twins;
        } else {
            rgb.extend(twins);
            rgb_labels.extend_from_slice(&batch.rgb_labels);
        }
    }
    let ir: Vec<Image> = batch.ir.iter().map(|i| random_crop(i, cfg.crop_pad, &mut rngs.crop)).collect::<Result<_>>()?;
    if cfg.mode == Regime::Cc && !ir.is_empty() {
        return Err(Error::invalid("train_step", "cloth-change batches must not contain IR images"));
    }

    let mut tape = Tape::new();
    let mut inputs = vec![(tape.input(stack(&rgb.iter().collect::<Vec<_>>())?)?, Modality::Rgb)];
    if !ir.is_empty() {
        inputs.push((tape.input(stack(&ir.iter().collect::<Vec<_>>())?)?, Modality::Ir));
    }
    let mut labels = rgb_labels;
    labels.extend_from_slice(&batch.ir_labels);

    let mut f = Forward::new(&mut tape, &model.store, BnMode::Train);
    let (feats, logits) = model.forward(&mut f, &inputs)?;
    let stats = f.into_stat_updates();
    let l_id = tape.softmax_cross_entropy(logits, &labels)?;
    let (l_sq, deltas) = sq_loss_on_tape(&mut tape, feats, &labels, &cfg.loss_options())?;
    let total = tape.add(l_id, l_sq)?;
    let (id_v, sq_v) = (tape.value(l_id).item() as f64, tape.value(l_sq).item() as f64);
    let report = LossReport { l_id: id_v, l_sq: sq_v, l_total: total_loss(id_v, sq_v)?, per_anchor_delta: deltas };

    let grads = tape.backward(total)?;
    if cfg.mode == Regime::Cc {
        if let Some((id, _)) = grads.iter().find(|(id, _)| model.store.get(*id).name.contains("_ir")) {
            return Err(Error::invalid("train_step", format!("IR parameter `{}` received a gradient", model.store.get(id).name)));
        }
    }
    opt.step(&mut model.store, &grads, lr, cfg);
    apply_stat_updates(&mut model.store, &stats);
    Ok(report)
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_id: f64,
    pub l_sq: f64,
    pub l_total: f64,
    pub mean_delta: f64,
}

pub const TRAIN_LOG_HEADER: [&str; 7] = ["step", "epoch", "lr", "l_id", "l_sq", "l_total", "mean_delta"];

pub fn write_train_log(log: &[StepLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    if log.is_empty() {
        w.write_record(TRAIN_LOG_HEADER)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Optional per-step callback, e.g. for progress output.
pub type Progress<'a> = &'a mut dyn FnMut(&StepLog);

/// Train a fresh model on `train` for `cfg.epochs * cfg.steps_per_epoch`
/// steps, stopping early only when `max_steps` is given.
pub fn train(cfg: &TrainConfig, train: &Dataset, max_steps: Option<usize>, mut progress: Option<Progress<'_>>) -> Result<(Model, Vec<StepLog>)> {
    cfg.validate()?;
    if train.manifest.regime != cfg.mode {
        return Err(Error::Config(format!(
            "training mode {} does not match dataset regime {}",
            cfg.mode.as_str(),
            train.manifest.regime.as_str()
        )));
    }
    let sampler = PkSampler::new(train)?;
    let mut model = Model::init(&ModelSpec::for_training(cfg, sampler.num_classes()), cfg.seed)?;
    let mut opt = Sgd::default();
    let mut batch_rng = stream_rng(cfg.seed, 1);
    let mut rngs = StepRngs::new(cfg.seed);
    let total = cfg.epochs * cfg.steps_per_epoch;
    let mut log = Vec::with_capacity(total);
    for step in 0..max_steps.map_or(total, |m| m.min(total)) {
        let epoch = step / cfg.steps_per_epoch;
        let lr = lr_schedule(epoch, cfg);
        let batch = sampler.sample_batch(cfg.p, cfg.k, &mut batch_rng)?;
        let r = train_step(&mut model, &mut opt, &batch, cfg, lr, &mut rngs).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}")),
            other => other,
        })?;
        let entry = StepLog { step, epoch, lr, l_id: r.l_id, l_sq: r.l_sq, l_total: r.l_total, mean_delta: r.mean_delta() };
        if let Some(p) = progress.as_mut() {
            p(&entry);
        }
        log.push(entry);
    }
    Ok((model, log))
}

/// Embed the test split and score every direction.
pub fn evaluate(model: &Model, test: &Dataset, directions: &[Direction]) -> Result<Vec<RetrievalReport>> {
    let metas: Vec<ItemMeta> = test.manifest.metas();
    let mut feats: Vec<Option<Vec<f32>>> = vec![None; test.len()];
    let dim = model.spec.backbone.emb_dim;
    for m in [Modality::Rgb, Modality::Ir] {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| metas[i].modality == m).collect();
        if idx.is_empty() {
            continue;
        }
        if m == Modality::Ir && !model.spec.with_ir {
            continue;
        }
        let e = model.embed_images(&idx.iter().map(|&i| &test.images[i]).collect::<Vec<_>>())?;
        for (r, &i) in idx.iter().enumerate() {
            feats[i] = Some(e.row(r).to_vec());
        }
    }
    let gather = |idx: &[usize]| -> Result<(Tensor<f32>, Vec<ItemMeta>)> {
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            let row = feats[i].as_ref().ok_or_else(|| Error::invalid("evaluate", "model has no stream for these images"))?;
            data.extend_from_slice(row);
        }
        Ok((Tensor::new([idx.len(), dim], data)?, idx.iter().map(|&i| metas[i]).collect()))
    };
    let mut out = Vec::with_capacity(directions.len());
    for &d in directions {
        let qg = build_query_gallery(&metas, d)?;
        let (qf, qm) = gather(&qg.queries)?;
        let (gf, gm) = gather(&qg.gallery)?;
        let report = cmc_map(d, &qf, &qm, &gf, &gm)?;
        report.validate()?;
        out.push(report);
    }
    Ok(out)
}

/// File name of a direction's report.
pub fn report_file(d: Direction) -> String {
    format!("report_{}.csv", d.as_str())
}

/// What a full train-and-evaluate run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: Model,
    pub log: Vec<StepLog>,
    pub reports: Vec<RetrievalReport>,
}

/// Train, evaluate, and write the checkpoint, the training log and one
/// report per direction into `out`.
pub fn run(cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset, out: &Path) -> Result<RunOutput> {
    let (model, log) = train(cfg, train_set, None, None)?;
    let reports = evaluate(&model, test_set, &cfg.directions())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    model.save(&out.join("checkpoint"))?;
    write_train_log(&log, &out.join("train_log.csv"))?;
    for r in &reports {
        r.write_csv(&out.join(report_file(r.direction)))?;
    }
    Ok(RunOutput { model, log, reports })
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub direction: Option<Direction>,
    pub result: std::result::Result<RetrievalReport, String>,
}

pub const ABLATION_HEADER: [&str; 8] = ["variant", "direction", "rank1", "rank5", "rank10", "rank20", "map", "status"];

/// Train and evaluate every variant of `base`. A failing row is recorded
/// and the rest still run.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_row: Option<&mut dyn FnMut(&AblationRow)>,
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for &variant in variants {
        let cfg = TrainConfig { variant, ..base.clone() };
        let result = train(&cfg, train_set, None, None).and_then(|(m, _)| evaluate(&m, test_set, &cfg.directions()));
        let new_rows: Vec<AblationRow> = match result {
            Ok(reports) => reports
                .into_iter()
                .map(|r| AblationRow { variant, direction: Some(r.direction), result: Ok(r) })
                .collect(),
            Err(e) => vec![AblationRow { variant, direction: None, result: Err(e.to_string()) }],
        };
        for r in new_rows {
            if let Some(cb) = on_row.as_mut() {
                cb(&r);
            }
            rows.push(r);
        }
    }
    rows
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ABLATION_HEADER)?;
    for row in rows {
        let dir = row.direction.map_or("", Direction::as_str);
        match &row.result {
            Ok(r) => w.write_record([
                row.variant.as_str(),
                dir,
                &r.rank(1).to_string(),
                &r.rank(5).to_string(),
                &r.rank(10).to_string(),
                &r.rank(20).to_string(),
                &r.map.to_string(),
                "ok",
            ])?,
            Err(e) => w.write_record([row.variant.as_str(), dir, "", "", "", "", "", &format!("error: {e}")])?,
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

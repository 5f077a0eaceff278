//! Command-line front end: `gen`, `train`, `eval`, `ablate`, `pct-apply`
//! and `export`.
//!
//! Every command that writes a run directory also writes `config.json`, a
//! fully-resolved [`RunConfig`] that can be passed back with `--config` to
//! repeat the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::color_aug::save_png;
use crate::data::{dir_is_empty, make_dataset, DataConfig, Dataset, DatasetManifest, Regime, Split};
use crate::error::{Error, Result};
use crate::eval::{Direction, RetrievalReport, REPORT_HEADER};
use crate::nn::Forward;
use crate::numerics::{BnMode, Tape};
use crate::pct::visualize;
use crate::trainer::{
    evaluate, report_file, run_ablation, stack, train, write_ablation_csv, write_train_log, Model, TrainConfig, Variant,
    ABLATION_HEADER, TRAIN_LOG_HEADER,
};

/// Default parent of run directories when `--out` is not given.
pub const OUT_ROOT_ENV: &str = "CSL_OUT_ROOT";
pub const CONFIG_ECHO: &str = "config.json";
pub const EXPORT_HEADER: [&str; 3] = ["series", "x", "y"];

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Everything a command needs besides its output location.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset directory read by `train`, `eval`, `ablate` and `pct-apply`.
    pub data_dir: Option<PathBuf>,
    /// Checkpoint directory read by `eval` and `pct-apply`.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub pct_apply: PctApplyConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Empty means every direction of the dataset's regime.
    pub directions: Vec<Direction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub rows: Vec<Variant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { rows: vec![Variant::Baseline, Variant::Ica, Variant::Pct, Variant::IcaPct] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PctApplyConfig {
    pub split: Split,
    /// At most this many images; 0 means all.
    pub limit: usize,
}

impl Default for PctApplyConfig {
    fn default() -> Self {
        Self { split: Split::Test, limit: 32 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Parser)]
#[command(name = "csl", version, about = "Cross-color re-identification on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Gen(GenArgs),
    /// Train one variant and evaluate it.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate several variants into one table.
    Ablate(AblateArgs),
    /// Write color-transformed images of a split.
    PctApply(PctApplyArgs),
    /// Convert a report, ablation or training-log CSV to `series,x,y`.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $CSL_OUT_ROOT/<command>-...]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long, env = OUT_ROOT_ENV, default_value = "runs", hide_env_values = true)]
    pub out_root: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_train_ids: Option<usize>,
    #[arg(long)]
    pub n_test_ids: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub clothing_sets: Option<usize>,
    #[arg(long)]
    pub images_per_cell: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub nonlocal: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// nir-rgb, rgb-nir, cc, or both.
    #[arg(long)]
    pub direction: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated variants, e.g. baseline,ica,pct,ica+pct.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<Variant>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct PctApplyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train or test.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// CSV written by `train`, `eval` or `ablate`.
    pub input: PathBuf,
    /// Output file [default: <input>.long.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `args` (including the program name) and run the command. Returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 1 for configuration and argument errors, 2 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid { .. } | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::PctApply(a) => cmd_pct_apply(a),
        Command::Export(a) => cmd_export(a),
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    common.config.as_deref().map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// Resolve and claim the output directory.
fn out_dir(common: &Common, default_name: String) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| common.out_root.join(default_name));
    if !common.force && !dir_is_empty(&dir)? {
        return Err(Error::Config(format!("{} is not empty; pass --force to write into it", dir.display())));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| Error::Config(format!("no {what} given (flag or config)")))?;
    if !p.exists() {
        return Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found"))));
    }
    Ok(p)
}

fn apply_train(t: &mut TrainConfig, o: &TrainOverrides) {
    if let Some(v) = o.variant {
        t.variant = v;
    }
    if let Some(s) = o.seed {
        t.seed = s;
    }
    if let Some(e) = o.epochs {
        t.epochs = e;
    }
    if let Some(s) = o.steps_per_epoch {
        t.steps_per_epoch = s;
    }
    if let Some(lr) = o.lr {
        t.lr0 = lr;
    }
    t.nonlocal |= o.nonlocal;
}

fn load_splits(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_set = Dataset::load(dir, Split::Train)?;
    let test_set = Dataset::load(dir, Split::Test)?;
    log::info!("loaded {} train and {} test images from {}", train_set.len(), test_set.len(), dir.display());
    Ok((train_set, test_set))
}

pub fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    let d = &mut cfg.data;
    d.regime = a.regime.unwrap_or(d.regime);
    d.seed = a.seed.unwrap_or(d.seed);
    d.n_train_ids = a.n_train_ids.unwrap_or(d.n_train_ids);
    d.n_test_ids = a.n_test_ids.unwrap_or(d.n_test_ids);
    d.views = a.views.unwrap_or(d.views);
    d.images_per_cell = a.images_per_cell.unwrap_or(d.images_per_cell);
    if a.clothing_sets.is_some() {
        d.clothing_sets = a.clothing_sets;
    }
    cfg.data = cfg.data.resolved();
    cfg.data.validate()?;
    let dir = out_dir(&a.common, format!("data-{}-s{}", cfg.data.regime.as_str(), cfg.data.seed))?;
    let (train_m, test_m) = make_dataset(&cfg.data, &dir)?;
    cfg.data_dir = Some(dir.clone());
    cfg.write(&dir)?;
    println!("wrote {}", dir.display());
    for m in [&train_m, &test_m] {
        print_manifest_summary(m);
    }
    Ok(())
}

fn print_manifest_summary(m: &DatasetManifest) {
    let ids = m.identities();
    let mut by_modality: BTreeMap<&str, usize> = BTreeMap::new();
    let mut by_clothing: BTreeMap<usize, usize> = BTreeMap::new();
    let mut per_id: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &m.rows {
        *by_modality.entry(r.modality.as_str()).or_default() += 1;
        *by_clothing.entry(r.clothing).or_default() += 1;
        *per_id.entry(r.identity).or_default() += 1;
    }
    let lo = per_id.values().min().copied().unwrap_or(0);
    let hi = per_id.values().max().copied().unwrap_or(0);
    let modality: Vec<String> = by_modality.iter().map(|(k, v)| format!("{k} {v}")).collect();
    let clothing: Vec<String> = by_clothing.iter().map(|(k, v)| format!("{k}: {v}")).collect();
    println!(
        "{:<5} {} images, {} identities ({lo}..{hi} images each); {}; clothing {}",
        m.split.as_str(),
        m.rows.len(),
        ids.len(),
        modality.join(", "),
        clothing.join(", ")
    );
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_train(&mut cfg.train, &a.train);
    let data_dir = required(a.data.or(cfg.data_dir.clone()), "dataset directory")?;
    let (train_set, test_set) = load_splits(&data_dir)?;
    cfg.train.mode = train_set.manifest.regime;
    cfg.train.validate()?;
    let dir = out_dir(&a.common, format!("train-{}-{}-s{}", cfg.train.mode.as_str(), cfg.train.variant, cfg.train.seed))?;
    cfg.data_dir = Some(data_dir);
    cfg.checkpoint = Some(dir.join("checkpoint"));
    cfg.eval.directions = cfg.train.directions();
    cfg.write(&dir)?;

    let per_epoch = cfg.train.steps_per_epoch;
    let mut progress = |s: &crate::trainer::StepLog| {
        if (s.step + 1) % per_epoch == 0 {
            log::info!("epoch {:>3} lr {:.4} id {:.4} sq {:.4} total {:.4}", s.epoch, s.lr, s.l_id, s.l_sq, s.l_total);
        }
    };
    let (model, log) = train(&cfg.train, &train_set, None, Some(&mut progress))?;
    model.save(&dir.join("checkpoint"))?;
    write_train_log(&log, &dir.join("train_log.csv"))?;
    let reports = evaluate(&model, &test_set, &cfg.eval.directions)?;
    write_reports(&reports, &dir)
}

fn write_reports(reports: &[RetrievalReport], dir: &Path) -> Result<()> {
    let mut stdout = std::io::stdout();
    for r in reports {
        let path = dir.join(report_file(r.direction));
        r.write_csv(&path)?;
        r.print_table(&mut stdout).map_err(|e| Error::io("<stdout>", e))?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}

/// Directions named by `--direction`; `both` means the two cross-modality
/// directions.
pub fn parse_directions(s: &str) -> Result<Vec<Direction>> {
    if s.eq_ignore_ascii_case("both") {
        return Ok(vec![Direction::NirToRgb, Direction::RgbToNir]);
    }
    s.split(',').map(str::parse).collect()
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    let ckpt = required(a.checkpoint.or(cfg.checkpoint.clone()), "checkpoint")?;
    let data_dir = required(a.data.or(cfg.data_dir.clone()), "dataset directory")?;
    if let Some(d) = a.direction.as_deref() {
        cfg.eval.directions = parse_directions(d)?;
    }
    let model = Model::load(&ckpt)?;
    let test_set = Dataset::load(&data_dir, Split::Test)?;
    if cfg.eval.directions.is_empty() {
        cfg.eval.directions = TrainConfig { mode: test_set.manifest.regime, ..TrainConfig::default() }.directions();
    }
    let dir = out_dir(&a.common, format!("eval-{}", ckpt.file_name().map_or("run".into(), |n| n.to_string_lossy())))?;
    cfg.checkpoint = Some(ckpt);
    cfg.data_dir = Some(data_dir);
    cfg.write(&dir)?;
    let reports = evaluate(&model, &test_set, &cfg.eval.directions)?;
    write_reports(&reports, &dir)
}

pub fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_train(&mut cfg.train, &a.train);
    if !a.rows.is_empty() {
        cfg.ablate.rows = a.rows;
    }
    let data_dir = required(a.data.or(cfg.data_dir.clone()), "dataset directory")?;
    let (train_set, test_set) = load_splits(&data_dir)?;
    cfg.train.mode = train_set.manifest.regime;
    cfg.train.validate()?;
    let dir = out_dir(&a.common, format!("ablate-{}-s{}", cfg.train.mode.as_str(), cfg.train.seed))?;
    cfg.data_dir = Some(data_dir);
    cfg.write(&dir)?;
    let mut on_row = |r: &crate::trainer::AblationRow| match &r.result {
        Ok(rep) => log::info!("{:<9} {:<8} rank1 {:.3} map {:.3}", r.variant, rep.direction, rep.rank1(), rep.map),
        Err(e) => log::error!("{}: {e}", r.variant),
    };
    let rows = run_ablation(&cfg.train, &cfg.ablate.rows, &train_set, &test_set, Some(&mut on_row));
    let path = dir.join("ablation.csv");
    write_ablation_csv(&rows, &path)?;
    println!("wrote {}", path.display());
    match rows.iter().find_map(|r| r.result.as_ref().err()) {
        Some(e) => Err(Error::Failed(format!("ablation row: {e}"))),
        None => Ok(()),
    }
}

pub fn cmd_pct_apply(a: PctApplyArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    let ckpt = required(a.checkpoint.or(cfg.checkpoint.clone()), "checkpoint")?;
    let data_dir = required(a.data.or(cfg.data_dir.clone()), "dataset directory")?;
    if let Some(s) = a.split.as_deref() {
        cfg.pct_apply.split = s.parse()?;
    }
    cfg.pct_apply.limit = a.limit.unwrap_or(cfg.pct_apply.limit);
    let model = Model::load(&ckpt)?;
    let Some(pct) = &model.pct else {
        return Err(Error::Config(format!("{} has no color transform", ckpt.display())));
    };
    let ds = Dataset::load(&data_dir, cfg.pct_apply.split)?;
    let dir = out_dir(&a.common, "pct-apply".into())?;
    cfg.checkpoint = Some(ckpt);
    cfg.data_dir = Some(data_dir);
    cfg.write(&dir)?;
    let n = if cfg.pct_apply.limit == 0 { ds.len() } else { cfg.pct_apply.limit.min(ds.len()) };
    for (row, img) in ds.manifest.rows.iter().zip(&ds.images).take(n) {
        if !model.spec.with_ir && img.modality == crate::color_aug::Modality::Ir {
            continue;
        }
        let mut tape = Tape::new();
        let x = tape.input(stack(&[img])?)?;
        let mut f = Forward::new(&mut tape, &model.store, BnMode::Eval);
        let y = pct.forward(&mut f, x, img.modality)?;
        let out = tape.value(y).clone().reshape([3, img.height(), img.width()])?;
        let path = dir.join(&row.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_png(&visualize(&out), &path)?;
    }
    println!("wrote {n} images to {}", dir.display());
    Ok(())
}

pub fn cmd_export(a: ExportArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| a.input.with_extension("long.csv"));
    let rows = long_format(&a.input)?;
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(EXPORT_HEADER)?;
    for (series, x, y) in &rows {
        w.write_record([series.as_str(), &x.to_string(), &y.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

/// `(series, x, y)` rows of a report, ablation table or training log.
pub fn long_format(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let bad = |m: String| Error::Config(format!("{}: {m}", path.display()));
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("not a number: `{s}`")));
    let mut out = Vec::new();
    if header == REPORT_HEADER {
        for rec in r.records() {
            let rec = rec?;
            if matches!(&rec[1], "cmc" | "map") {
                out.push((format!("{}/{}", &rec[0], &rec[1]), num(&rec[2])?, num(&rec[3])?));
            }
        }
    } else if header == ABLATION_HEADER {
        for rec in r.records() {
            let rec = rec?;
            if &rec[7] != "ok" {
                continue;
            }
            let series = format!("{}/{}", &rec[0], &rec[1]);
            for (col, k) in [(2, 1.0), (3, 5.0), (4, 10.0), (5, 20.0)] {
                out.push((format!("{series}/cmc"), k, num(&rec[col])?));
            }
            out.push((format!("{series}/map"), 0.0, num(&rec[6])?));
        }
    } else if header == TRAIN_LOG_HEADER {
        for rec in r.records() {
            let rec = rec?;
            let step = num(&rec[0])?;
            for (i, name) in TRAIN_LOG_HEADER.iter().enumerate().skip(2) {
                out.push((name.to_string(), step, num(&rec[i])?));
            }
        }
    } else {
        return Err(bad(format!(
            "unrecognized header `{}`; expected one of `{}`, `{}`, `{}`",
            header.join(","),
            REPORT_HEADER.join(","),
            ABLATION_HEADER.join(","),
            TRAIN_LOG_HEADER.join(",")
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("csl").chain(args.iter().copied()))
    }

    #[test]
    fn unknown_config_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"lr0": 0.05, "learning_rate": 1}}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert_eq!(exit_code(&err), EXIT_USAGE);
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig { data_dir: Some("d".into()), ..RunConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        cfg.write(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&dir.path().join(CONFIG_ECHO)).unwrap(), cfg);
    }

    #[test]
    fn direction_lists() {
        assert_eq!(parse_directions("both").unwrap(), vec![Direction::NirToRgb, Direction::RgbToNir]);
        assert_eq!(parse_directions("cc").unwrap(), vec![Direction::ClothChange]);
        assert!(parse_directions("sideways").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_args(&["frobnicate"]), EXIT_USAGE);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        assert_eq!(run_args(&["gen", "--n-train-ids", "1", "--out", out.to_str().unwrap()]), EXIT_USAGE);
        assert_eq!(run_args(&["--help"]), EXIT_OK);
    }

    #[test]
    fn missing_inputs_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("e");
        let missing = dir.path().join("nope");
        let code = run_args(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_RUNTIME);
    }

    #[test]
    fn gen_refuses_non_empty_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let small = ["--n-train-ids", "2", "--n-test-ids", "2", "--views", "2", "--images-per-cell", "1"];
        let mut args = vec!["gen", "--out", out];
        args.extend(small);
        assert_eq!(run_args(&args), EXIT_OK);
        assert!(dir.path().join(CONFIG_ECHO).exists());
        assert_eq!(run_args(&args), EXIT_USAGE);
        args.push("--force");
        assert_eq!(run_args(&args), EXIT_OK);
    }

    #[test]
    fn export_rejects_unknown_header_and_converts_reports() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "a,b\n1,2\n").unwrap();
        assert!(long_format(&bad).is_err());
        let report = RetrievalReport {
            direction: Direction::NirToRgb,
            cmc: (1..=20).map(|k| k as f64 / 20.0).collect(),
            map: 0.5,
            n_queries: 4,
            n_gallery: 9,
            n_dropped: 0,
            first_hit: vec![],
        };
        let path = dir.path().join("r.csv");
        report.write_csv(&path).unwrap();
        let rows = long_format(&path).unwrap();
        assert_eq!(rows.len(), 21);
        assert_eq!(rows[0], ("nir-rgb/cmc".to_string(), 1.0, 0.05));
        assert_eq!(rows[20], ("nir-rgb/map".to_string(), 0.0, 0.5));
    }
}

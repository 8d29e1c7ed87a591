//! Command-line front end: `synth`, `split`, `train`, `eval`, `gradcam`,
//! `report` and `compare`.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 runtime.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::checkpoint::checkpoint_load;
use crate::config::{env_overrides, Granularity, Override, RunConfig};
use crate::dataio::image::load_record;
use crate::dataio::manifest::parse_manifest;
use crate::dataio::{
    crop_lesion, generate_synthetic, resize_pair, split_patients, stack_modalities, DatasetManifest, ImagePair,
    SignalChannels, SplitPlan, SynthConfig,
};
use crate::error::{Error, ErrorKind, Result};
use crate::gradcam::{gradcam_ensemble, gradcam_single, overlay, overlay_file_name, Colormap, Heatmap, DEFAULT_ALPHA};
use crate::metrics::report::{
    build_report, evaluate_fold, format_pct, model_display, render_report, CVReport, CellKey, PatientInfo,
    ReportFormat,
};
use crate::metrics::{aggregate_cv, read_predictions, Metrics, Prediction};
use crate::model::{Model, ModelKind};
use crate::nn::WeightSource;
use crate::training::{batch_tensor, cross_validate, RecipeConfig, RunLayout};
use crate::types::{Label, Modality};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Runtime => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "bsefuse", version, about = "Dual-modality breast ultrasound ensemble classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Split patients into a fixed test set and cross-validation folds.
    Split(SplitArgs),
    /// Cross-validate one model on one modality.
    Train(TrainArgs),
    /// Metrics from stored prediction files.
    Eval(EvalArgs),
    /// Grad-CAM overlay for one image.
    Gradcam(GradcamArgs),
    /// Render report tables from a finished run.
    Report(ReportArgs),
    /// Cross-validate a grid of models and modalities.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub patients: usize,
    #[arg(long, default_value_t = 3)]
    pub images_min: usize,
    #[arg(long, default_value_t = 5)]
    pub images_max: usize,
    #[arg(long, default_value_t = 0.5)]
    pub balance: f64,
    /// gray, color or both.
    #[arg(long, default_value = "both")]
    pub signal: String,
    #[arg(long, default_value_t = 160)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output JSON path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Flags that override the run configuration.
#[derive(Debug, Args, Default)]
pub struct RunFlags {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Precomputed split plan (JSON).
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// alexnet, resnet18 or ensemble.
    #[arg(long)]
    pub model: Option<String>,
    /// b, se or bse.
    #[arg(long)]
    pub modality: Option<String>,
    /// Crop to the lesion ROI.
    #[arg(long, conflicts_with = "no_crop")]
    pub crop: bool,
    #[arg(long)]
    pub no_crop: bool,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Network input side in pixels.
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// auto, pretrained or seeded.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub weights_seed: Option<u64>,
    /// zero or mean.
    #[arg(long)]
    pub inflation: Option<String>,
    /// Pretrained weight cache directory.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Report formats, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub format: Vec<String>,
    /// Add soft-voting baseline rows.
    #[arg(long)]
    pub voting: bool,
}

fn text(s: &str) -> Value {
    Value::String(s.to_string())
}

fn path(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

impl RunFlags {
    pub fn overrides(&self) -> Result<Vec<Override>> {
        let mut o: Vec<Override> = Vec::new();
        let mut put = |s: &str, k: &str, v: Value| o.push((s.to_string(), k.to_string(), v));
        if let Some(p) = &self.manifest {
            put("data", "manifest", path(p));
        }
        if let Some(p) = &self.split {
            put("data", "split", path(p));
        }
        if let Some(v) = self.folds {
            put("data", "folds", int(v));
        }
        if let Some(v) = self.test_fraction {
            put("data", "test_fraction", Value::Float(v));
        }
        if let Some(p) = &self.run {
            put("io", "run_dir", path(p));
        }
        if let Some(p) = &self.cache_dir {
            put("io", "cache_dir", path(p));
        }
        if let Some(m) = &self.model {
            put("model", "architecture", text(m.parse::<ModelKind>()?.name()));
        }
        if let Some(w) = &self.weights {
            put("model", "weights", text(w));
        }
        if let Some(v) = self.weights_seed {
            put("model", "weights_seed", Value::Integer(v as i64));
        }
        if let Some(i) = &self.inflation {
            put("model", "inflation", text(i));
        }
        if let Some(m) = &self.modality {
            put("train", "modality", text(m));
        }
        if self.crop {
            put("train", "crop", Value::Boolean(true));
        }
        if self.no_crop {
            put("train", "crop", Value::Boolean(false));
        }
        if self.no_augment {
            put("train", "augment", Value::Boolean(false));
        }
        if let Some(v) = self.epochs {
            put("train", "max_epochs", int(v));
        }
        if let Some(v) = self.patience {
            put("train", "patience", int(v));
        }
        if let Some(v) = self.min_delta {
            put("train", "min_delta", Value::Float(v));
        }
        if let Some(v) = self.lr {
            put("train", "learning_rate", Value::Float(v));
        }
        if let Some(v) = self.batch_size {
            put("train", "batch_size", int(v));
        }
        if let Some(v) = self.side {
            put("train", "image_side", int(v));
        }
        if let Some(v) = self.seed {
            put("train", "seed", Value::Integer(v as i64));
        }
        if !self.format.is_empty() {
            put("eval", "formats", Value::Array(self.format.iter().map(|f| text(f)).collect()));
        }
        if self.voting {
            put("eval", "voting", Value::Boolean(true));
        }
        Ok(o)
    }

    /// File < `BSEFUSE_*` environment < flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::merge(self.config.as_deref(), &env_overrides(std::env::vars()), &self.overrides()?)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: RunFlags,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub flags: RunFlags,
    /// Models to compare, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    /// Modalities to compare, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Patient-wise metrics only.
    #[arg(long, conflicts_with = "image_wise")]
    pub patient_wise: bool,
    /// Image-wise metrics only.
    #[arg(long)]
    pub image_wise: bool,
    /// Restrict to one output (alexnet, resnet18, ensemble, voting).
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub image: String,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Checkpoint to explain; defaults to the run's model.
    #[arg(long)]
    pub model: Option<String>,
    /// Target class (benign or malignant); defaults to the prediction.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f32,
    /// jet or hot.
    #[arg(long, default_value = "jet")]
    pub colormap: String,
    /// Output directory; defaults to `<run>/gradcam`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the raw heatmap as JSON.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// csv, json or both, comma separated; defaults to the run's config.
    #[arg(long, value_delimiter = ',')]
    pub format: Vec<String>,
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcam(a) => cmd_gradcam(a),
        Command::Report(a) => cmd_report(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_patients: a.patients,
        images_per_patient: (a.images_min, a.images_max),
        class_balance: a.balance,
        signal_channels: a.signal.parse::<SignalChannels>()?,
        image_size: a.image_size,
        seed: a.seed,
    };
    let (m, files) = generate_synthetic(&cfg, &a.out)?;
    println!(
        "{}: {} patients, {} image pairs, {} files",
        a.out.join("manifest.jsonl").display(),
        m.n_patients(),
        m.n_bmode(),
        files.len()
    );
    Ok(())
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(p, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(p, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let m = parse_manifest(&a.manifest)?;
    let plan = split_patients(&m, a.test_fraction, a.folds, a.seed)?;
    write_json(&a.out, &plan)?;
    println!(
        "{}: {} test patients, {} folds of {:?}",
        a.out.display(),
        plan.test_patients.len(),
        plan.n_folds(),
        plan.folds.iter().map(|f| f.len()).collect::<Vec<_>>()
    );
    Ok(())
}

/// Provenance record written to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub git: Option<String>,
    pub model: ModelKind,
    pub modality: Modality,
    pub crop: bool,
    pub train_seed: u64,
    pub split_seed: u64,
    pub synth_seed: Option<u64>,
    pub weights: String,
    pub manifest: PathBuf,
    pub n_folds: usize,
}

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

fn describe_weights(w: &WeightSource) -> String {
    match w {
        WeightSource::Pretrained(dir) => format!("pretrained:{}", dir.display()),
        WeightSource::Seeded(s) => format!("seeded:{s}"),
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Load the configured manifest, generating the synthetic set into
/// `<run_dir>/data` when the config asks for one.
fn resolve_manifest(cfg: &RunConfig, run_dir: &Path) -> Result<(DatasetManifest, PathBuf)> {
    match (&cfg.data.manifest, &cfg.data.synth) {
        (Some(p), _) => Ok((parse_manifest(p)?, absolute(p))),
        (None, Some(s)) => {
            let dir = run_dir.join("data");
            let (m, _) = generate_synthetic(s, &dir)?;
            Ok((m, absolute(&dir.join("manifest.jsonl"))))
        }
        (None, None) => Err(Error::Config(
            "no dataset: set data.manifest, data.synth or --manifest".into(),
        )),
    }
}

fn resolve_split(cfg: &RunConfig, m: &DatasetManifest) -> Result<SplitPlan> {
    let plan = match &cfg.data.split {
        Some(p) => read_json(p)?,
        None => split_patients(m, cfg.data.test_fraction, cfg.data.folds, cfg.train.seed)?,
    };
    plan.validate(m)?;
    Ok(plan)
}

fn require_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.io
        .run_dir
        .clone()
        .ok_or_else(|| Error::Config("run directory required (--run or io.run_dir)".into()))
}

/// Cross-validate `model` under `cfg` into `run_dir`, write the snapshot,
/// provenance and report, and return the report.
pub fn train_run(cfg: &RunConfig, model: ModelKind, run_dir: &Path) -> Result<CVReport> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let (manifest, manifest_path) = resolve_manifest(cfg, run_dir)?;
    let plan = resolve_split(cfg, &manifest)?;
    let recipe = cfg.recipe(model);
    let layout = RunLayout::new(run_dir);

    let mut snapshot = cfg.clone();
    snapshot.data.manifest = Some(manifest_path.clone());
    snapshot.data.synth = None;
    snapshot.data.split = None;
    snapshot.model.architecture = model;
    snapshot.io.run_dir = Some(absolute(run_dir));
    std::fs::write(layout.config(), snapshot.to_toml()?).map_err(|e| Error::io(layout.config(), e))?;
    write_json(&layout.split(), &plan)?;
    write_json(
        &layout.run_json(),
        &RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            git: git_describe(),
            model,
            modality: cfg.train.modality,
            crop: cfg.train.crop,
            train_seed: cfg.train.seed,
            split_seed: plan.seed,
            synth_seed: cfg.data.synth.as_ref().map(|s| s.seed),
            weights: describe_weights(&recipe.weights),
            manifest: manifest_path,
            n_folds: plan.n_folds(),
        },
    )?;

    cross_validate(&manifest, &plan, &recipe, &cfg.train, Some(run_dir))?;
    let report = report_from_runs(&[run_dir.to_path_buf()])?;
    render_report(&report, &layout.report_dir(), &cfg.eval.formats)?;
    Ok(report)
}

fn print_summary(report: &CVReport) {
    println!("{:<20} {:<8} {:<6} {:>16} {:>16} {:>16}", "model", "modality", "crop", "image acc", "patient acc", "recognition");
    for c in &report.cells {
        println!(
            "{:<20} {:<8} {:<6} {:>16} {:>16} {:>16}",
            model_display(&c.key.model),
            c.key.modality.name(),
            c.key.crop,
            format_pct(Some(c.image.accuracy)),
            format_pct(Some(c.patient.accuracy)),
            format_pct(Some(c.recognition_rate)),
        );
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.flags.resolve()?;
    let run_dir = require_run_dir(&cfg)?;
    let report = train_run(&cfg, cfg.model.architecture, &run_dir)?;
    print_summary(&report);
    Ok(())
}

/// Cell directory name inside a comparison run.
pub fn cell_dir_name(model: ModelKind, modality: Modality) -> String {
    format!("{}_{}", model.name(), modality.name())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let mut overrides = a.flags.overrides()?;
    if !a.models.is_empty() {
        let models = a
            .models
            .iter()
            .map(|m| Ok(text(m.parse::<ModelKind>()?.name())))
            .collect::<Result<Vec<_>>>()?;
        overrides.push(("model".into(), "compare_models".into(), Value::Array(models)));
    }
    if !a.modalities.is_empty() {
        let mods = a.modalities.iter().map(|m| text(m)).collect();
        overrides.push(("model".into(), "compare_modalities".into(), Value::Array(mods)));
    }
    let cfg = RunConfig::merge(a.flags.config.as_deref(), &env_overrides(std::env::vars()), &overrides)?;
    let root = require_run_dir(&cfg)?;
    let report = compare_models(&cfg, &root)?;
    print_summary(&report);
    Ok(())
}

/// Cross-validate every (model, modality) cell of `cfg` into
/// `<root>/<model>_<modality>` and render the combined report into
/// `<root>/report`.
pub fn compare_models(cfg: &RunConfig, root: &Path) -> Result<CVReport> {
    if cfg.model.compare_models.is_empty() {
        return Err(Error::Config("compare needs at least one model".into()));
    }
    if cfg.model.compare_modalities.is_empty() {
        return Err(Error::Config("compare needs at least one modality".into()));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut cfg = cfg.clone();
    // Generate a synthetic set once so every cell sees the same images.
    if cfg.data.manifest.is_none() {
        let (_, p) = resolve_manifest(&cfg, root)?;
        cfg.data.manifest = Some(p);
        cfg.data.synth = None;
    }
    let layout = RunLayout::new(root);
    std::fs::write(layout.config(), cfg.to_toml()?).map_err(|e| Error::io(layout.config(), e))?;
    let mut dirs = Vec::new();
    for &modality in &cfg.model.compare_modalities {
        for &model in &cfg.model.compare_models {
            let mut cell = cfg.clone();
            cell.train.modality = modality;
            let dir = root.join(cell_dir_name(model, modality));
            train_run(&cell, model, &dir)?;
            dirs.push(dir);
        }
    }
    let report = report_from_runs(&dirs)?;
    render_report(&report, &layout.report_dir(), &cfg.eval.formats)?;
    Ok(report)
}

fn load_run_config(run_dir: &Path) -> Result<RunConfig> {
    let p = RunLayout::new(run_dir).config();
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    RunConfig::from_toml(&text)
}

/// Outputs whose predictions a run reports on.
fn reported_outputs(cfg: &RunConfig) -> Vec<&'static str> {
    RecipeConfig::new(cfg.model.architecture, WeightSource::Seeded(0))
        .outputs()
        .into_iter()
        .filter(|o| *o != "voting" || cfg.eval.voting)
        .collect()
}

/// Per-fold predictions of each report cell.
type Cells = Vec<(CellKey, Vec<Vec<Prediction>>)>;

fn run_cells(run_dir: &Path) -> Result<(RunConfig, Cells)> {
    let cfg = load_run_config(run_dir)?;
    let layout = RunLayout::new(run_dir);
    let n = layout.n_folds();
    if n == 0 {
        return Err(Error::EmptyInput("run has no fold directories"));
    }
    let mut cells = Vec::new();
    for output in reported_outputs(&cfg) {
        let folds = (0..n)
            .map(|k| read_predictions(&layout.predictions(k, output)))
            .collect::<Result<Vec<_>>>()?;
        cells.push((CellKey::new(output, cfg.train.modality, cfg.train.crop), folds));
    }
    Ok((cfg, cells))
}

fn patient_info(cfg: &RunConfig) -> PatientInfo {
    cfg.data
        .manifest
        .as_deref()
        .and_then(|p| parse_manifest(p).ok())
        .map(|m| {
            m.patients
                .values()
                .map(|p| (p.patient_id.clone(), (p.histological_type.clone(), p.strain_ratio)))
                .collect()
        })
        .unwrap_or_default()
}

/// Runs under `dir`: the directory itself if it holds folds, else its
/// immediate subdirectories that do, in name order.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if RunLayout::new(dir).n_folds() > 0 {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && RunLayout::new(p).n_folds() > 0 && RunLayout::new(p).config().is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::EmptyInput("no finished runs"));
    }
    Ok(runs)
}

pub fn report_from_runs(runs: &[PathBuf]) -> Result<CVReport> {
    let mut cells = Vec::new();
    let mut info = PatientInfo::new();
    for r in runs {
        let (cfg, c) = run_cells(r)?;
        info.extend(patient_info(&cfg));
        cells.extend(c);
    }
    build_report(cells, &info)
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let runs = find_runs(&a.run)?;
    let formats = if a.format.is_empty() {
        let cfg = load_run_config(&a.run).or_else(|_| load_run_config(&runs[0]))?;
        cfg.eval.formats
    } else {
        a.format.iter().map(|f| f.parse()).collect::<Result<Vec<ReportFormat>>>()?
    };
    let report = report_from_runs(&runs)?;
    let written = render_report(&report, &RunLayout::new(&a.run).report_dir(), &formats)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn metric_row(label: &str, m: &Metrics) -> String {
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
    let [acc, prec, spec, sens, f1] = m.values();
    format!("{label:<10} {:>8} {:>9} {:>11} {:>11} {:>8}", f(acc), f(prec), f(spec), f(sens), f(f1))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut any = false;
    for run in find_runs(&a.run)? {
        let (cfg, cells) = run_cells(&run)?;
        let granularity = if a.patient_wise {
            Granularity::Patient
        } else if a.image_wise {
            Granularity::Image
        } else {
            cfg.eval.granularity
        };
        for (key, folds) in cells {
            if a.model.as_deref().is_some_and(|m| m != key.model) {
                continue;
            }
            any = true;
            let evals = folds
                .iter()
                .enumerate()
                .map(|(k, p)| evaluate_fold(k, p))
                .collect::<Result<Vec<_>>>()?;
            let levels: &[(&str, bool)] = match granularity {
                Granularity::Image => &[("image", false)],
                Granularity::Patient => &[("patient", true)],
                Granularity::Both => &[("image", false), ("patient", true)],
            };
            for &(level, patient) in levels {
                println!("{} [{level}-wise]", key.label());
                println!("{:<10} {:>8} {:>9} {:>11} {:>11} {:>8}", "fold", "accuracy", "precision", "specificity", "sensitivity", "f1");
                let per: Vec<Metrics> = evals.iter().map(|e| if patient { e.patient } else { e.image }).collect();
                for (k, m) in per.iter().enumerate() {
                    println!("{}", metric_row(&format!("{k}"), m));
                }
                let agg = aggregate_cv(&per)?;
                let [acc, prec, spec, sens, f1] = agg.values();
                println!(
                    "{:<10} {:>8} {:>9} {:>11} {:>11} {:>8}",
                    "mean±sd",
                    format_pct(acc),
                    format_pct(prec),
                    format_pct(spec),
                    format_pct(sens),
                    format_pct(f1)
                );
                println!();
            }
        }
    }
    if !any {
        return Err(Error::Config("no matching model in run".into()));
    }
    Ok(())
}

fn plane_to_rgb(gray: &ndarray::Array2<f32>) -> RgbImage {
    let (h, w) = gray.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (gray[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

fn color_to_rgb(color: &ndarray::Array3<f32>) -> RgbImage {
    let (h, w, _) = color.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = |c: usize| (color[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([p(0), p(1), p(2)])
    })
}

/// Image under the overlay: B-mode for `b`/`bse`, elastography for `se`.
pub fn overlay_source(pair: &ImagePair, modality: Modality) -> RgbImage {
    match modality {
        Modality::Se => color_to_rgb(&pair.color),
        _ => plane_to_rgb(&pair.gray),
    }
}

/// Explain one image with a run's checkpoint; returns the heatmap and the
/// overlay path.
pub fn gradcam_image(a: &GradcamArgs) -> Result<(Heatmap, PathBuf)> {
    let cfg = load_run_config(&a.run)?;
    let manifest_path = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("run config has no manifest".into()))?;
    let manifest = parse_manifest(&manifest_path)?;
    let record = manifest
        .image(&a.image)
        .ok_or_else(|| Error::Config(format!("image {:?} not in manifest", a.image)))?;
    let mut pair = load_record(&manifest, record)?;
    if cfg.train.crop {
        if let Some(roi) = record.roi {
            pair = crop_lesion(&pair, roi)?;
        }
    }
    let pair = resize_pair(&pair, cfg.train.image_side)?;
    let sample = stack_modalities(&pair, cfg.train.modality)?;
    let x = batch_tensor(&[&sample])?;

    let name = match &a.model {
        Some(m) if m == "ensemble" => "ensemble".to_string(),
        Some(m) => m.parse::<ModelKind>()?.name().to_string(),
        None => cfg.model.architecture.name().to_string(),
    };
    let ckpt = RunLayout::new(&a.run).checkpoint(a.fold, &name);
    let (model, _) = checkpoint_load(&ckpt)?;
    let target = a.class.as_deref().map(|c| c.parse::<Label>()).transpose()?.map(Label::index);
    let heatmap = match &model {
        Model::Single(b) => gradcam_single(b, &x, target)?,
        Model::Ensemble(e) => gradcam_ensemble(e, &x, target)?,
    };
    let out_dir = a.out.clone().unwrap_or_else(|| a.run.join("gradcam"));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let colormap: Colormap = a.colormap.parse()?;
    let img = overlay(&heatmap, &overlay_source(&pair, cfg.train.modality), colormap, a.alpha)?;
    let file = out_dir.join(overlay_file_name(&a.image, cfg.train.modality.name(), heatmap.target_class));
    img.save(&file)?;
    if a.raw {
        heatmap.write_json(&file.with_extension("json"))?;
    }
    Ok((heatmap, file))
}

fn cmd_gradcam(a: GradcamArgs) -> Result<()> {
    let (h, file) = gradcam_image(&a)?;
    let (r, c) = h.peak();
    println!("{} (class {}, peak at row {r}, col {c})", file.display(), h.target_class);
    Ok(())
}

/// Per-output mean patient-wise accuracy of a finished run, keyed by output.
pub fn patient_accuracy(run_dir: &Path) -> Result<BTreeMap<String, f64>> {
    let (_, cells) = run_cells(run_dir)?;
    let mut out = BTreeMap::new();
    for (key, folds) in cells {
        let accs = folds
            .iter()
            .enumerate()
            .map(|(k, p)| evaluate_fold(k, p).map(|e| e.patient.accuracy))
            .collect::<Result<Vec<_>>>()?;
        out.insert(key.model, accs.iter().sum::<f64>() / accs.len() as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_usage_errors() {
        assert_eq!(run_command(["bsefuse", "--help"]), EXIT_OK);
        assert_eq!(run_command(["bsefuse", "train", "--help"]), EXIT_OK);
        assert_eq!(run_command(["bsefuse", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_command(["bsefuse", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run_command(["bsefuse"]), EXIT_USAGE);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        // Missing max_epochs is a configuration error.
        assert_eq!(run_command(["bsefuse", "train", "--run", "/nonexistent/x"]), EXIT_CONFIG);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.jsonl");
        let out = dir.path().join("split.json");
        let code = run_command([
            "bsefuse",
            "split",
            "--manifest",
            missing.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_DATA);
        assert!(!out.exists());
    }

    #[test]
    fn flags_override_in_order() {
        let flags = RunFlags {
            epochs: Some(4),
            model: Some("resnet".into()),
            crop: true,
            format: vec!["json".into()],
            ..RunFlags::default()
        };
        let cfg = RunConfig::merge(None, &[], &flags.overrides().unwrap()).unwrap();
        assert_eq!(cfg.train.max_epochs, 4);
        assert_eq!(cfg.model.architecture, ModelKind::ResNet18);
        assert!(cfg.train.crop);
        assert_eq!(cfg.eval.formats, vec![ReportFormat::Json]);
    }

    #[test]
    fn synth_then_split() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let d = data.to_str().unwrap();
        assert_eq!(
            run_command(["bsefuse", "synth", "--out", d, "--patients", "10", "--image-size", "64", "--seed", "3"]),
            EXIT_OK
        );
        let manifest = data.join("manifest.jsonl");
        let split = dir.path().join("split.json");
        let args = [
            "bsefuse",
            "split",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            split.to_str().unwrap(),
            "--test-fraction",
            "0.2",
            "--folds",
            "2",
            "--seed",
            "1",
        ];
        assert_eq!(run_command(args), EXIT_OK);
        let plan: SplitPlan = read_json(&split).unwrap();
        assert_eq!(plan.n_folds(), 2);
        assert_eq!(run_command(["bsefuse", "synth", "--out", d, "--signal", "purple"]), EXIT_CONFIG);
    }
}

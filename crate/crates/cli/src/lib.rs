//! Command-line driver: train, eval, gradcheck, ablate, sweep and synth.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or configs, 2 when a
//! run fails.

pub mod ablate;
pub mod plot;

// Every training step frees and reallocates multi-megabyte buffers, which the
// system allocator hands back to the kernel each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use capsnet3d::checkpoint;
use capsnet3d::config::ModelConfig;
use capsnet3d::dataset::{synthetic_splits, write_directory, CorruptionSpec, Shape};
use capsnet3d::gradsuite::{full_cases, module_cases};
use capsnet3d::training::{
    evaluate, load_splits, sweep, sweep_csv, train, SweepCell, SweepMode, TrainOptions, CHECKPOINT_DIR,
};
use capsnet3d::Error;
use capsnet3d_tensor::suite::{op_cases, GradcheckCase};
use capsnet3d_tensor::{Element, GradcheckOptions};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablate::{
    failure_manifest, recon_csv, run_ablation, runs_csv, table1_csv, table3_csv, AblationOptions, PIPELINES,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "capsnet3d", version, about = "Capsule classifiers for 3D point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write metrics, a config snapshot and the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint, optionally under test-time corruption.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Classifier, ComposeCaps and reconstruction-loss ablation tables.
    Ablate(AblateArgs),
    /// Train-noise by test-noise robustness grids with SVG charts.
    Sweep(SweepArgs),
    /// Write a synthetic primitive dataset to disk.
    #[command(name = "synth-data", alias = "synth")]
    Synth(SynthArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Model and data config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Run seed; defaults to the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Suppress progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Stop after the first epoch whose test accuracy reaches this value.
    #[arg(long)]
    pub stop_at: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config file; defaults to the snapshot stored with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Replace this many points of every sample with outliers.
    #[arg(long, default_value_t = 0)]
    pub outliers: usize,
    /// Add Gaussian noise with this standard deviation to every coordinate.
    #[arg(long, default_value_t = 0.0)]
    pub perturb: f64,
    /// Seed of the corruption streams.
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Also write the result as JSON into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Every tensor operation.
    Ops,
    /// Operations plus every network module.
    Modules,
    /// Modules plus end-to-end losses.
    Full,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::Full)]
    pub scope: Scope,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of seeds per cell, starting at the run seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Outliers injected into every test sample when scoring.
    #[arg(long, default_value_t = 0)]
    pub test_outliers: usize,
    /// Independent runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Outliers,
    Perturb,
}

impl From<Mode> for SweepMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Outliers => SweepMode::Outliers,
            Mode::Perturb => SweepMode::Perturb,
        }
    }
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Comma-separated levels for both axes, replacing the defaults.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Comma-separated test levels, when they should differ from `--levels`.
    #[arg(long, value_delimiter = ',')]
    pub test_levels: Option<Vec<f64>>,
    /// Sweep all four extractor and aggregator pipelines, not only the configured one.
    #[arg(long)]
    pub all_pipelines: bool,
    /// Training-noise levels trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated shapes.
    #[arg(long, value_delimiter = ',', default_value = "sphere,cube,cylinder,cone")]
    pub shapes: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// A failure plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME },
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, S>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, stdout),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(&a, stdout),
        Command::Ablate(a) => cmd_ablate(&a, stdout),
        Command::Sweep(a) => cmd_sweep(&a, stdout),
        Command::Synth(a) => cmd_synth(&a, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Reads and validates a config. Any problem with it is a validation error.
fn load_config(path: &Path) -> std::result::Result<ModelConfig, Failure> {
    ModelConfig::from_file(path).map_err(|e| match e {
        Error::Io { .. } => Failure::validation(e.to_string()),
        _ => Failure::validation(format!("{}: {e}", path.display())),
    })
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn resolved(common: &Common) -> std::result::Result<ModelConfig, Failure> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train_with<T: Element>(cfg: &ModelConfig, a: &TrainArgs) -> std::result::Result<(usize, f64), Failure> {
    let splits = load_splits(cfg)?;
    let opts = TrainOptions {
        out_dir: Some(a.common.out.clone()),
        log: !a.common.quiet,
        stop_at: a.stop_at,
        ..Default::default()
    };
    let run = train::<T>(cfg, &splits, cfg.seed, &opts)?;
    Ok((run.best_epoch, run.best_accuracy))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = resolved(&a.common)?;
    let (epoch, acc) = match a.common.precision {
        Precision::F32 => train_with::<f32>(&cfg, a)?,
        Precision::F64 => train_with::<f64>(&cfg, a)?,
    };
    let _ = writeln!(out, "best test accuracy {acc:.4} at epoch {epoch}");
    let _ = writeln!(out, "artifacts in {}", a.common.out.display());
    Ok(())
}

fn eval_with<T: Element>(
    dir: &Path,
    cfg: &ModelConfig,
    data: &capsnet3d::dataset::Dataset,
    spec: &CorruptionSpec,
) -> std::result::Result<capsnet3d::training::EvalResult, Failure> {
    let (store, _) = checkpoint::load::<T>(dir, cfg)?;
    Ok(evaluate(&store, cfg, data, Some(spec))?)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let cfg_path = a.config.clone().unwrap_or_else(|| a.checkpoint.join(checkpoint::CONFIG));
    let cfg = load_config(&cfg_path)?;
    if !(a.perturb >= 0.0) {
        return Err(Failure::validation("--perturb must be non-negative"));
    }
    if a.outliers > cfg.n_points {
        return Err(Failure::validation(format!("--outliers exceeds n_points ({})", cfg.n_points)));
    }
    let splits = load_splits(&cfg)?;
    let data = match a.split {
        Split::Train => &splits.train,
        Split::Test => &splits.test,
    };
    let spec = CorruptionSpec {
        outlier_count: a.outliers,
        perturb_std: a.perturb,
        seed: a.noise_seed,
    };
    let result = match a.precision {
        Precision::F32 => eval_with::<f32>(&a.checkpoint, &cfg, data, &spec)?,
        Precision::F64 => eval_with::<f64>(&a.checkpoint, &cfg, data, &spec)?,
    };
    let _ = writeln!(out, "accuracy {:.4} ({} samples)", result.accuracy, result.predictions.len());
    for c in &result.per_class {
        let acc = if c.total == 0 { 0.0 } else { c.correct as f64 / c.total as f64 };
        let _ = writeln!(out, "  {:<12} {acc:.4} ({}/{})", c.class, c.correct, c.total);
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let json = serde_json::json!({
            "accuracy": result.accuracy,
            "per_class": result.per_class,
            "split": format!("{:?}", a.split).to_lowercase(),
            "outliers": a.outliers,
            "perturb": a.perturb,
            "noise_seed": a.noise_seed,
        });
        write_file(&dir.join("eval.json"), &(serde_json::to_string_pretty(&json).expect("json") + "\n"))?;
    }
    Ok(())
}

pub fn gradcheck_cases(scope: Scope, seed: u64) -> Vec<GradcheckCase> {
    let mut cases = op_cases(seed);
    if scope != Scope::Ops {
        cases.extend(module_cases(seed));
    }
    if scope == Scope::Full {
        cases.extend(full_cases(seed));
    }
    cases
}

/// Runs each case, printing its worst relative error. Returns the names of
/// the failing cases.
pub fn report_gradcheck(cases: &[GradcheckCase], opts: &GradcheckOptions, out: &mut dyn Write) -> Vec<String> {
    let mut failed = Vec::new();
    for case in cases {
        match case.run(opts) {
            Ok(r) => {
                let verdict = if r.passed { "ok" } else { "FAIL" };
                let _ = writeln!(out, "{:<40} {:>10.3e}  {verdict}", case.name, r.max_rel_error);
                if !r.passed {
                    failed.push(case.name.clone());
                }
            }
            Err(e) => {
                let _ = writeln!(out, "{:<40} error: {e}  FAIL", case.name);
                failed.push(case.name.clone());
            }
        }
    }
    failed
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    if !(a.step > 0.0) || !(a.tolerance > 0.0) {
        return Err(Failure::validation("--step and --tolerance must be positive"));
    }
    let cases = gradcheck_cases(a.scope, a.seed);
    let opts = GradcheckOptions {
        step: a.step,
        tolerance: a.tolerance,
    };
    let failed = report_gradcheck(&cases, &opts, out);
    let _ = writeln!(out, "{} of {} cases passed", cases.len() - failed.len(), cases.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

pub fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = resolved(&a.common)?;
    if a.seeds == 0 || a.parallel == 0 {
        return Err(Failure::validation("--seeds and --parallel must be positive"));
    }
    if a.test_outliers > cfg.n_points {
        return Err(Failure::validation(format!("--test-outliers exceeds n_points ({})", cfg.n_points)));
    }
    let splits = load_splits(&cfg)?;
    create_dir(&a.common.out)?;
    let opts = AblationOptions {
        seeds: (0..a.seeds).map(|k| cfg.seed + k).collect(),
        test_outliers: a.test_outliers,
        parallel: a.parallel,
        log: !a.common.quiet,
    };
    let outcomes = match a.common.precision {
        Precision::F32 => run_ablation::<f32>(&cfg, &splits, &opts),
        Precision::F64 => run_ablation::<f64>(&cfg, &splits, &opts),
    };
    let dir = &a.common.out;
    write_file(&dir.join("classifier.csv"), &table1_csv(&outcomes))?;
    write_file(&dir.join("compose_caps.csv"), &table3_csv(&outcomes))?;
    write_file(&dir.join("reconstruction.csv"), &recon_csv(&outcomes))?;
    write_file(&dir.join("runs.csv"), &runs_csv(&outcomes))?;
    write_file(&dir.join("failures.json"), &failure_manifest(&outcomes))?;
    write_file(&dir.join("config.cfg"), &cfg.to_config_string())?;
    let failures = outcomes.iter().filter(|o| o.result.is_err()).count();
    let _ = writeln!(out, "{} runs, {failures} failed; tables in {}", outcomes.len(), dir.display());
    if failures > 0 {
        return Err(Failure::runtime(format!("{failures} ablation runs failed; see failures.json")));
    }
    Ok(())
}

fn sweep_with<T: Element>(
    cfg: &ModelConfig,
    mode: SweepMode,
    train_levels: &[f64],
    test_levels: &[f64],
    parallel: usize,
) -> std::result::Result<Vec<SweepCell>, Failure> {
    let splits = load_splits(cfg)?;
    Ok(sweep::<T>(cfg, &splits, mode, train_levels, test_levels, cfg.seed, parallel)?)
}

pub fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> CmdResult {
    let base = resolved(&a.common)?;
    let mode = SweepMode::from(a.mode);
    if a.parallel == 0 {
        return Err(Failure::validation("--parallel must be positive"));
    }
    let train_levels = a.levels.clone().unwrap_or_else(|| mode.default_levels());
    let test_levels = a.test_levels.clone().or_else(|| a.levels.clone()).unwrap_or_else(|| mode.default_levels());
    if train_levels.is_empty() || test_levels.is_empty() {
        return Err(Failure::validation("level lists must be nonempty"));
    }
    for &l in train_levels.iter().chain(&test_levels) {
        mode.spec(l, 0)?;
        if mode == SweepMode::Outliers && l as usize > base.n_points {
            return Err(Failure::validation(format!("outlier level {l} exceeds n_points ({})", base.n_points)));
        }
    }
    let pipelines: Vec<_> = if a.all_pipelines {
        PIPELINES.to_vec()
    } else {
        vec![(base.extractor, base.aggregator)]
    };
    create_dir(&a.common.out)?;
    let mode_name = match a.mode {
        Mode::Outliers => "outliers",
        Mode::Perturb => "perturb",
    };
    let mut curves: Vec<(String, Vec<SweepCell>)> = Vec::new();
    for (e, ag) in pipelines {
        for classifier in [capsnet3d::config::ClassifierKind::Fc, capsnet3d::config::ClassifierKind::Capsule] {
            let mut cfg = ablate::pipeline_config(&base, e, ag);
            cfg.classifier = classifier;
            let label = format!("{e}_{ag}_{classifier}");
            if !a.common.quiet {
                eprintln!("sweeping {label}");
            }
            let cells = match a.common.precision {
                Precision::F32 => sweep_with::<f32>(&cfg, mode, &train_levels, &test_levels, a.parallel)?,
                Precision::F64 => sweep_with::<f64>(&cfg, mode, &train_levels, &test_levels, a.parallel)?,
            };
            write_file(
                &a.common.out.join(format!("{mode_name}_{label}.csv")),
                &sweep_csv(mode, &cells),
            )?;
            curves.push((label, cells));
        }
    }
    let x_labels: Vec<String> = test_levels.iter().map(|&l| mode.format_level(l)).collect();
    let x_title = match a.mode {
        Mode::Outliers => "outlier points in the test set",
        Mode::Perturb => "perturbation std of the test set",
    };
    for &tl in &train_levels {
        let series: Vec<plot::Series> = curves
            .iter()
            .map(|(label, cells)| plot::Series {
                label: label.clone(),
                values: test_levels
                    .iter()
                    .map(|&x| {
                        cells
                            .iter()
                            .find(|c| c.train_level == tl && c.test_level == x)
                            .map(|c| c.accuracy)
                    })
                    .collect(),
            })
            .collect();
        let level = mode.format_level(tl);
        let title = match a.mode {
            Mode::Outliers => format!("outlier points in training set: {level}"),
            Mode::Perturb => format!("perturbation of the training set: std={level}"),
        };
        let svg = plot::line_chart(&title, x_title, &x_labels, &series);
        write_file(&a.common.out.join(format!("{mode_name}_train_{level}.svg")), &svg)?;
    }
    let _ = writeln!(
        out,
        "{} curves x {} training levels written to {}",
        curves.len(),
        train_levels.len(),
        a.common.out.display()
    );
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> CmdResult {
    let shapes = a
        .shapes
        .iter()
        .map(|s| s.trim().parse::<Shape>().map_err(Failure::validation))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if shapes.is_empty() || a.per_class < 5 {
        return Err(Failure::validation("need at least one shape and --per-class >= 5"));
    }
    let splits = synthetic_splits(&shapes, a.per_class, a.points, a.seed)?;
    write_directory(&a.out, &splits)?;
    let _ = writeln!(
        out,
        "wrote {} train and {} test samples to {}",
        splits.train.len(),
        splits.test.len(),
        a.out.display()
    );
    Ok(())
}

/// Checkpoint directory inside a training output directory.
pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_DIR)
}


//! Training loop, evaluation and noise sweeps.
//!
//! Metrics are written one JSON object per line with the fields of
//! [`EpochMetrics`]. Sweep grids are CSV with the header
//! `train_level,test_level,accuracy`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use capsnet3d_tensor::{Element, Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{AggregatorKind, DataSource, ModelConfig};
use crate::dataset::{
    build_training_mix, derive_seed, load_dataset, make_batch, synthetic_splits, CorruptionSpec, Dataset, Splits,
};
use crate::error::{Error, Result};
use crate::model::{forward, init_params, init_vlad_from_corpus, loss, predictions};
use crate::optim::{lr_schedule, Adam, AdamConfig};
use crate::params::{Ctx, Mode, ParamStore};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.cfg";
pub const CHECKPOINT_DIR: &str = "checkpoint";

// stream indices under the run seed
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_VLAD: u64 = 4;
const STREAM_MIX: u64 = 5;
const STREAM_TEST_NOISE: u64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    /// Margin loss, or cross-entropy for the FC head.
    pub loss_margin: f64,
    /// Unscaled reconstruction error; zero when the decoder is off.
    pub loss_recon: f64,
    /// Evaluation-mode accuracy on the training set after the epoch; `None`
    /// when [`TrainOptions::skip_train_eval`] is set.
    pub acc_train: Option<f64>,
    pub acc_test: f64,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write metrics, the config snapshot and the best checkpoint.
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub log: bool,
    /// Stop after the first epoch whose test accuracy reaches this value.
    pub stop_at: Option<f64>,
    /// Skip scoring the training set after each epoch. Test accuracy, which
    /// picks the best checkpoint, is always computed.
    pub skip_train_eval: bool,
}

pub struct TrainRun<T: Element> {
    /// Parameters from the epoch with the best test accuracy.
    pub best: ParamStore<T>,
    pub last: ParamStore<T>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub metrics: Vec<EpochMetrics>,
}

/// Builds the train/test splits described by the config's data section.
pub fn load_splits(cfg: &ModelConfig) -> Result<Splits> {
    let splits = match cfg.source {
        DataSource::Synthetic => synthetic_splits(&cfg.shapes, cfg.samples_per_class, cfg.n_points, cfg.data_seed)?,
        DataSource::Directory => {
            let root = cfg
                .root
                .as_ref()
                .ok_or_else(|| Error::config("root", "required when source = directory"))?;
            load_dataset(root, cfg.format, cfg.n_points, cfg.data_seed)?
        }
    };
    if splits.train.num_classes() != cfg.num_classes {
        return Err(Error::config(
            "num_classes",
            format!("config says {} but the data has {} classes", cfg.num_classes, splits.train.num_classes()),
        ));
    }
    Ok(splits)
}

fn write_jsonl(path: &Path, m: &EpochMetrics) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(m).expect("metrics serialize");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Trains from fresh parameters. Runs `cfg.epochs` epochs, evaluating on
/// the test split after each, and keeps the parameters with the best test
/// accuracy (earliest epoch on ties).
pub fn train<T: Element>(cfg: &ModelConfig, splits: &Splits, seed: u64, opts: &TrainOptions) -> Result<TrainRun<T>> {
    cfg.validate()?;
    if splits.train.len() < cfg.batch_size {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the {} training samples", cfg.batch_size, splits.train.len()),
        ));
    }
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
    let ckpt_dir = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_DIR));
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snap = dir.join(CONFIG_FILE);
        fs::write(&snap, cfg.to_config_string()).map_err(|e| Error::io(&snap, e))?;
        let mp = dir.join(METRICS_FILE);
        fs::write(&mp, "").map_err(|e| Error::io(&mp, e))?;
    }

    let mix = CorruptionSpec {
        outlier_count: cfg.train_outliers,
        perturb_std: cfg.train_perturb,
        seed: derive_seed(seed, STREAM_MIX),
    };
    let mixed;
    let train_set = if mix.is_identity() {
        &splits.train
    } else {
        mixed = build_training_mix(&splits.train, &mix)?;
        &mixed
    };

    let mut store = init_params::<T>(cfg, derive_seed(seed, STREAM_INIT));
    if cfg.aggregator == AggregatorKind::NetVlad {
        let corpus: Vec<Tensor<T>> = train_set
            .batches(cfg.batch_size, Some(derive_seed(seed, STREAM_VLAD)))?
            .take(cfg.vlad_init_batches)
            .map(|b| b.points.cast())
            .collect();
        init_vlad_from_corpus(&mut store, cfg, &corpus, derive_seed(seed, STREAM_VLAD))?;
    }

    let mut adam = Adam::new(AdamConfig::default());
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay_every, cfg.lr_decay);
        let mut iter = train_set.batches(cfg.batch_size, Some(derive_seed(derive_seed(seed, STREAM_SHUFFLE), epoch as u64)))?;
        let (mut sum_total, mut sum_cls, mut sum_rec) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        while let Some(batch) = iter.next_batch::<T>() {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &store, Mode::Train)
                .with_dropout_seed(derive_seed(derive_seed(seed, STREAM_DROPOUT), step));
            let x = ctx.g.constant(batch.points);
            let out = forward(&mut ctx, x, cfg, Some(&batch.labels))?;
            let parts = loss(&mut ctx, &out, x, &batch.labels, cfg)?;
            let total = ctx.g.value(parts.total).item().to_f64_lossy();
            if !total.is_finite() {
                return Err(divergence(epoch, step, &ckpt_dir, best_epoch, best_accuracy));
            }
            sum_total += total;
            sum_cls += ctx.g.value(parts.classification).item().to_f64_lossy();
            if let Some(r) = parts.reconstruction {
                sum_rec += ctx.g.value(r).item().to_f64_lossy();
            }
            ctx.g.backward(parts.total)?;
            let grads = ctx.take_grads();
            let stats = ctx.take_bn_stats();
            drop(ctx);
            if let Err(e) = adam.step(&mut store, &grads, lr) {
                return Err(match e {
                    Error::Divergence(msg) => Error::Divergence(format!(
                        "{msg}; {}",
                        divergence(epoch, step, &ckpt_dir, best_epoch, best_accuracy)
                    )),
                    other => other,
                });
            }
            store.update_bn_stats(&stats, cfg.bn_momentum)?;
            step += 1;
            batches += 1;
        }
        let acc_train = if opts.skip_train_eval {
            None
        } else {
            Some(evaluate(&store, cfg, train_set, None)?.accuracy)
        };
        let acc_test = evaluate(&store, cfg, &splits.test, None)?.accuracy;
        let nb = batches.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            lr,
            loss_total: sum_total / nb,
            loss_margin: sum_cls / nb,
            loss_recon: sum_rec / nb,
            acc_train,
            acc_test,
            seconds: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        if acc_test > best_accuracy {
            best_accuracy = acc_test;
            best_epoch = epoch;
            best = store.clone();
            if let Some(dir) = &ckpt_dir {
                checkpoint::save(dir, &best, cfg, epoch, acc_test)?;
            }
        }
        if let Some(p) = &metrics_path {
            write_jsonl(p, &m)?;
        }
        if opts.log {
            let train = m.acc_train.map_or("-".to_string(), |a| format!("{a:.4}"));
            eprintln!(
                "epoch {:>3}  lr {:.6}  loss {:.5}  train {train}  test {:.4}",
                epoch, lr, m.loss_total, m.acc_test
            );
        }
        history.push(m);
        if opts.stop_at.is_some_and(|target| acc_test >= target) {
            break;
        }
    }
    if cfg.epochs == 0 {
        best_accuracy = evaluate(&store, cfg, &splits.test, None)?.accuracy;
        if let Some(dir) = &ckpt_dir {
            checkpoint::save(dir, &store, cfg, 0, best_accuracy)?;
        }
    }
    Ok(TrainRun {
        best,
        last: store,
        best_epoch,
        best_accuracy,
        metrics: history,
    })
}

fn divergence(epoch: usize, step: u64, ckpt: &Option<PathBuf>, best_epoch: usize, best_acc: f64) -> Error {
    let kept = match ckpt {
        Some(dir) if best_acc.is_finite() => {
            format!("last good checkpoint (epoch {best_epoch}) kept at {}", dir.display())
        }
        _ => "no checkpoint was written".to_string(),
    };
    Error::Divergence(format!("training diverged at epoch {epoch}, step {step}; {kept}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub predictions: Vec<usize>,
}

/// Evaluation-mode accuracy over every sample, optionally corrupting the
/// inputs first.
pub fn evaluate<T: Element>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    dataset: &Dataset,
    corruption: Option<&CorruptionSpec>,
) -> Result<EvalResult> {
    let corrupted;
    let data = match corruption {
        Some(spec) if !spec.is_identity() => {
            corrupted = dataset.corrupted(spec)?;
            &corrupted
        }
        _ => dataset,
    };
    let n_classes = data.num_classes().max(cfg.num_classes);
    let mut per_class: Vec<ClassAccuracy> = (0..n_classes)
        .map(|c| ClassAccuracy {
            class: data.class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
            correct: 0,
            total: 0,
        })
        .collect();
    let mut preds = Vec::with_capacity(data.len());
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(cfg.batch_size.max(1)) {
        let batch = make_batch::<T>(data, chunk);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, store, Mode::Eval).with_grads(false);
        let x = ctx.g.constant(batch.points);
        let out = forward(&mut ctx, x, cfg, None)?;
        preds.extend(predictions(ctx.g.value(out.scores)));
    }
    let mut correct = 0;
    for (s, &p) in data.samples.iter().zip(&preds) {
        let entry = per_class
            .get_mut(s.label)
            .ok_or_else(|| Error::Schema(format!("label {} outside the {n_classes} classes", s.label)))?;
        entry.total += 1;
        if p == s.label {
            entry.correct += 1;
            correct += 1;
        }
    }
    Ok(EvalResult {
        accuracy: if data.is_empty() { 0.0 } else { correct as f64 / data.len() as f64 },
        per_class,
        predictions: preds,
    })
}

/// Loads a checkpoint directory (rejecting a foreign architecture) and
/// evaluates it.
pub fn evaluate_checkpoint(
    dir: &Path,
    cfg: &ModelConfig,
    dataset: &Dataset,
    corruption: Option<&CorruptionSpec>,
) -> Result<EvalResult> {
    let (store, _) = checkpoint::load::<f32>(dir, cfg)?;
    evaluate(&store, cfg, dataset, corruption)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    Outliers,
    Perturb,
}

impl SweepMode {
    /// Default levels, used for both the training and test axes.
    pub fn default_levels(self) -> Vec<f64> {
        match self {
            SweepMode::Outliers => crate::dataset::OUTLIER_LEVELS.iter().map(|&c| c as f64).collect(),
            SweepMode::Perturb => crate::dataset::PERTURB_LEVELS.to_vec(),
        }
    }

    pub fn spec(self, level: f64, seed: u64) -> Result<CorruptionSpec> {
        match self {
            SweepMode::Outliers => {
                if level < 0.0 || level.fract() != 0.0 {
                    return Err(Error::Argument(format!("outlier level {level} is not a count")));
                }
                Ok(CorruptionSpec::outliers(level as usize, seed))
            }
            SweepMode::Perturb => {
                if !(level >= 0.0) {
                    return Err(Error::Argument(format!("perturbation std {level} is negative")));
                }
                Ok(CorruptionSpec::perturb(level, seed))
            }
        }
    }

    pub fn format_level(self, level: f64) -> String {
        match self {
            SweepMode::Outliers => format!("{}", level as usize),
            SweepMode::Perturb => format!("{level}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub train_level: f64,
    pub test_level: f64,
    pub accuracy: f64,
}

/// Trains once per training-noise level and evaluates each model at every
/// test-noise level. Up to `parallel` training runs proceed at once; the
/// grid is identical for any thread count.
pub fn sweep<T: Element>(
    cfg: &ModelConfig,
    splits: &Splits,
    mode: SweepMode,
    train_levels: &[f64],
    test_levels: &[f64],
    seed: u64,
    parallel: usize,
) -> Result<Vec<SweepCell>> {
    if train_levels.is_empty() || test_levels.is_empty() {
        return Err(Error::Argument("sweep level lists must be nonempty".into()));
    }
    let test_specs = test_levels
        .iter()
        .map(|&l| mode.spec(l, derive_seed(seed, STREAM_TEST_NOISE)))
        .collect::<Result<Vec<_>>>()?;
    let run_row = |train_level: f64| -> Result<Vec<SweepCell>> {
        let spec = mode.spec(train_level, 0)?;
        let mut c = cfg.clone();
        c.train_outliers = spec.outlier_count;
        c.train_perturb = spec.perturb_std;
        let opts = TrainOptions {
            skip_train_eval: true,
            ..Default::default()
        };
        let run = train::<T>(&c, splits, seed, &opts)?;
        test_specs
            .iter()
            .zip(test_levels)
            .map(|(s, &test_level)| {
                Ok(SweepCell {
                    train_level,
                    test_level,
                    accuracy: evaluate(&run.best, &c, &splits.test, Some(s))?.accuracy,
                })
            })
            .collect()
    };
    let rows = parallel_map(train_levels, parallel, |&l| run_row(l));
    let mut cells = Vec::new();
    for row in rows {
        cells.extend(row?);
    }
    Ok(cells)
}

/// Maps `f` over `items` on up to `threads` scoped threads, preserving order.
pub fn parallel_map<I: Sync, R: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> R + Sync) -> Vec<R>
where
    I: Copy,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut out);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.expect("every item mapped")).collect()
}

pub fn sweep_csv(mode: SweepMode, cells: &[SweepCell]) -> String {
    let mut s = String::from("train_level,test_level,accuracy\n");
    for c in cells {
        s.push_str(&format!(
            "{},{},{}\n",
            mode.format_level(c.train_level),
            mode.format_level(c.test_level),
            c.accuracy
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Shape;

    #[test]
    fn default_levels() {
        assert_eq!(SweepMode::Outliers.default_levels(), vec![0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0]);
        assert_eq!(SweepMode::Perturb.default_levels(), vec![0.0, 0.02, 0.04, 0.06, 0.08, 0.1]);
    }

    #[test]
    fn level_labels_match_requests() {
        let cells: Vec<SweepCell> = [0.0, 0.02, 0.1]
            .iter()
            .map(|&l| SweepCell {
                train_level: 0.06,
                test_level: l,
                accuracy: 0.5,
            })
            .collect();
        let csv = sweep_csv(SweepMode::Perturb, &cells);
        assert_eq!(csv, "train_level,test_level,accuracy\n0.06,0,0.5\n0.06,0.02,0.5\n0.06,0.1,0.5\n");
        assert_eq!(SweepMode::Outliers.format_level(100.0), "100");
    }

    #[test]
    fn fractional_outlier_level_rejected() {
        assert!(SweepMode::Outliers.spec(2.5, 0).is_err());
        assert!(SweepMode::Perturb.spec(-0.1, 0).is_err());
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..23).collect();
        let serial = parallel_map(&items, 1, |&i| i * i);
        assert_eq!(parallel_map(&items, 4, |&i| i * i), serial);
    }

    #[test]
    fn class_count_mismatch_names_the_key() {
        let mut cfg = ModelConfig::new(
            crate::config::ExtractorKind::PointNet,
            AggregatorKind::MaxPool,
            crate::config::ClassifierKind::Fc,
        );
        cfg.shapes = vec![Shape::Sphere, Shape::Cube];
        cfg.num_classes = 2;
        cfg.samples_per_class = 5;
        cfg.n_points = 16;
        assert_eq!(load_splits(&cfg).unwrap().train.num_classes(), 2);
        cfg.num_classes = 3;
        match load_splits(&cfg) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "num_classes"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}

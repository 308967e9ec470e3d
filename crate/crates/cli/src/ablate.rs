//! Classifier, ComposeCaps and reconstruction-loss ablation grids.
//!
//! Each seed trains 16 distinct models: the FC baseline and three capsule
//! variants (full, without ComposeCaps, without reconstruction loss) for
//! each of the four extractor and aggregator pipelines. The full capsule
//! model is shared by all three tables.

use capsnet3d::config::{AggregatorKind, ClassifierKind, ExtractorKind, ModelConfig};
use capsnet3d::dataset::{derive_seed, CorruptionSpec, Splits};
use capsnet3d::training::{evaluate, parallel_map, train, TrainOptions};
use capsnet3d::Result;
use capsnet3d_tensor::Element;
use serde::Serialize;

pub const PIPELINES: [(ExtractorKind, AggregatorKind); 4] = [
    (ExtractorKind::PointNet, AggregatorKind::MaxPool),
    (ExtractorKind::PointNet, AggregatorKind::NetVlad),
    (ExtractorKind::EdgeConv, AggregatorKind::MaxPool),
    (ExtractorKind::EdgeConv, AggregatorKind::NetVlad),
];

/// Stream index for test-time corruption in ablations.
const STREAM_ABLATE_NOISE: u64 = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Fc,
    Capsule,
    NoComposeCaps,
    NoReconstruction,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Fc, Variant::Capsule, Variant::NoComposeCaps, Variant::NoReconstruction];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fc => "fc",
            Variant::Capsule => "capsule",
            Variant::NoComposeCaps => "capsule_no_compose",
            Variant::NoReconstruction => "capsule_no_recon",
        }
    }
}

pub fn extractor_label(e: ExtractorKind) -> &'static str {
    match e {
        ExtractorKind::PointNet => "PointNet",
        ExtractorKind::EdgeConv => "EdgeConv",
    }
}

pub fn aggregator_label(a: AggregatorKind) -> &'static str {
    match a {
        AggregatorKind::MaxPool => "Maxpooling",
        AggregatorKind::NetVlad => "NetVlad",
    }
}

/// Moves `base` onto another extractor and aggregator. When the aggregator
/// changes, the per-point width is rescaled so the ratio between the
/// max-pool and NetVLAD widths stays that of the default architecture.
pub fn pipeline_config(base: &ModelConfig, extractor: ExtractorKind, aggregator: AggregatorKind) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.extractor = extractor;
    if aggregator != base.aggregator {
        let from = base.aggregator.default_feature_width();
        let to = aggregator.default_feature_width();
        cfg.final_width = (base.final_width * to / from).max(1);
        cfg.aggregator = aggregator;
    }
    cfg
}

pub fn variant_config(base: &ModelConfig, extractor: ExtractorKind, aggregator: AggregatorKind, v: Variant) -> ModelConfig {
    let mut cfg = pipeline_config(base, extractor, aggregator);
    cfg.classifier = if v == Variant::Fc { ClassifierKind::Fc } else { ClassifierKind::Capsule };
    cfg.compose_caps = v != Variant::NoComposeCaps;
    cfg.reconstruction_loss = v != Variant::NoReconstruction;
    cfg
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSpec {
    pub extractor: ExtractorKind,
    pub aggregator: AggregatorKind,
    pub variant: Variant,
    pub seed: u64,
}

impl RunSpec {
    pub fn name(&self) -> String {
        format!("{}_{}_{}_seed{}", self.extractor, self.aggregator, self.variant.as_str(), self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub result: std::result::Result<f64, String>,
}

pub fn run_specs(seeds: &[u64]) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for &seed in seeds {
        for (extractor, aggregator) in PIPELINES {
            for variant in Variant::ALL {
                specs.push(RunSpec {
                    extractor,
                    aggregator,
                    variant,
                    seed,
                });
            }
        }
    }
    specs
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub seeds: Vec<u64>,
    /// Outliers injected into every test sample before scoring.
    pub test_outliers: usize,
    pub parallel: usize,
    pub log: bool,
}

fn run_one<T: Element>(base: &ModelConfig, splits: &Splits, spec: &RunSpec, test_outliers: usize) -> Result<f64> {
    let cfg = variant_config(base, spec.extractor, spec.aggregator, spec.variant);
    let opts = TrainOptions {
        skip_train_eval: true,
        ..Default::default()
    };
    let run = train::<T>(&cfg, splits, spec.seed, &opts)?;
    let noise = CorruptionSpec::outliers(test_outliers, derive_seed(spec.seed, STREAM_ABLATE_NOISE));
    Ok(evaluate(&run.best, &cfg, &splits.test, Some(&noise))?.accuracy)
}

/// Trains every run of the grid. Failures are recorded, not propagated.
pub fn run_ablation<T: Element>(base: &ModelConfig, splits: &Splits, opts: &AblationOptions) -> Vec<RunOutcome> {
    let specs = run_specs(&opts.seeds);
    parallel_map(&specs, opts.parallel, |spec| {
        let result = run_one::<T>(base, splits, spec, opts.test_outliers).map_err(|e| e.to_string());
        if opts.log {
            match &result {
                Ok(acc) => eprintln!("{:<48} {acc:.4}", spec.name()),
                Err(e) => eprintln!("{:<48} FAILED: {e}", spec.name()),
            }
        }
        RunOutcome { spec: *spec, result }
    })
}

/// Mean accuracy over seeds; `None` if any seed of that cell failed.
pub fn cell(outcomes: &[RunOutcome], e: ExtractorKind, a: AggregatorKind, v: Variant) -> Option<f64> {
    let accs: Vec<&std::result::Result<f64, String>> = outcomes
        .iter()
        .filter(|o| o.spec.extractor == e && o.spec.aggregator == a && o.spec.variant == v)
        .map(|o| &o.result)
        .collect();
    if accs.is_empty() || accs.iter().any(|r| r.is_err()) {
        return None;
    }
    Some(accs.iter().map(|r| *r.as_ref().expect("checked")).sum::<f64>() / accs.len() as f64)
}

fn pct(v: Option<f64>) -> String {
    v.map(|a| format!("{:.2}", 100.0 * a)).unwrap_or_default()
}

/// Classifier comparison: 8 rows, one per pipeline and classifier.
pub fn table1_csv(outcomes: &[RunOutcome]) -> String {
    let mut s = String::from("feature_extraction,aggregation,classifier,accuracy\n");
    for (e, a) in PIPELINES {
        for (v, label) in [(Variant::Fc, "FC"), (Variant::Capsule, "Capsule")] {
            s.push_str(&format!(
                "{},{},{label},{}\n",
                extractor_label(e),
                aggregator_label(a),
                pct(cell(outcomes, e, a, v))
            ));
        }
    }
    s
}

/// ComposeCaps comparison: 8 rows, No then Yes for each pipeline.
pub fn table3_csv(outcomes: &[RunOutcome]) -> String {
    let mut s = String::from("method,compose_caps,accuracy\n");
    for (e, a) in PIPELINES {
        for (v, label) in [(Variant::NoComposeCaps, "No"), (Variant::Capsule, "Yes")] {
            s.push_str(&format!(
                "{}+{},{label},{}\n",
                extractor_label(e),
                aggregator_label(a),
                pct(cell(outcomes, e, a, v))
            ));
        }
    }
    s
}

/// Reconstruction-loss comparison: a No and a Yes row across the four
/// pipelines.
pub fn recon_csv(outcomes: &[RunOutcome]) -> String {
    let mut s = String::from("recons_loss,PointNet+Max,PointNet+NetVlad,EdgeConv+Max,EdgeConv+NetVlad\n");
    for (v, label) in [(Variant::NoReconstruction, "No"), (Variant::Capsule, "Yes")] {
        let cells: Vec<String> = PIPELINES.iter().map(|&(e, a)| pct(cell(outcomes, e, a, v))).collect();
        s.push_str(&format!("{label},{}\n", cells.join(",")));
    }
    s
}

/// Every individual run at full precision.
pub fn runs_csv(outcomes: &[RunOutcome]) -> String {
    let mut s = String::from("extractor,aggregator,variant,seed,accuracy\n");
    for o in outcomes {
        let acc = o.result.as_ref().map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{acc}\n",
            o.spec.extractor,
            o.spec.aggregator,
            o.spec.variant.as_str(),
            o.spec.seed
        ));
    }
    s
}

#[derive(Serialize)]
struct Failure<'a> {
    run: String,
    extractor: &'static str,
    aggregator: &'static str,
    variant: &'static str,
    seed: u64,
    error: &'a str,
}

/// JSON list of the runs that failed, empty when all succeeded.
pub fn failure_manifest(outcomes: &[RunOutcome]) -> String {
    let failures: Vec<Failure> = outcomes
        .iter()
        .filter_map(|o| {
            o.result.as_ref().err().map(|e| Failure {
                run: o.spec.name(),
                extractor: o.spec.extractor.as_str(),
                aggregator: o.spec.aggregator.as_str(),
                variant: o.spec.variant.as_str(),
                seed: o.spec.seed,
                error: e,
            })
        })
        .collect();
    serde_json::to_string_pretty(&failures).expect("failures serialize") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(seeds: &[u64], fail: Option<RunSpec>) -> Vec<RunOutcome> {
        run_specs(seeds)
            .into_iter()
            .enumerate()
            .map(|(i, spec)| RunOutcome {
                spec,
                result: if Some(spec) == fail {
                    Err("boom".into())
                } else {
                    Ok(0.5 + 0.01 * (i % 7) as f64)
                },
            })
            .collect()
    }

    #[test]
    fn grid_has_sixteen_runs_per_seed() {
        assert_eq!(run_specs(&[1, 2, 3]).len(), 48);
    }

    #[test]
    fn table_shapes() {
        let outcomes = fake(&[1], None);
        let t1 = table1_csv(&outcomes);
        assert_eq!(t1.lines().count(), 9);
        assert!(t1.lines().skip(1).all(|l| l.split(',').count() == 4));
        let t3 = table3_csv(&outcomes);
        assert_eq!(t3.lines().count(), 9);
        let flags: Vec<&str> = t3.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(flags, ["No", "Yes", "No", "Yes", "No", "Yes", "No", "Yes"]);
        let rc = recon_csv(&outcomes);
        assert_eq!(rc.lines().count(), 3);
        assert!(rc.lines().all(|l| l.split(',').count() == 5));
        assert_eq!(failure_manifest(&outcomes).trim(), "[]");
    }

    #[test]
    fn failed_run_leaves_a_blank_cell_and_a_manifest_entry() {
        let bad = RunSpec {
            extractor: ExtractorKind::EdgeConv,
            aggregator: AggregatorKind::NetVlad,
            variant: Variant::Fc,
            seed: 2,
        };
        let outcomes = fake(&[1, 2], Some(bad));
        let t1 = table1_csv(&outcomes);
        assert!(t1.contains("EdgeConv,NetVlad,FC,\n"));
        assert!(t1.contains("EdgeConv,NetVlad,Capsule,5"));
        let manifest = failure_manifest(&outcomes);
        assert!(manifest.contains("edgeconv_netvlad_fc_seed2"));
        assert!(manifest.contains("boom"));
    }

    #[test]
    fn aggregator_swap_keeps_width_ratio() {
        let mut base = ModelConfig::new(ExtractorKind::PointNet, AggregatorKind::MaxPool, ClassifierKind::Capsule);
        base.final_width = 256;
        let v = pipeline_config(&base, ExtractorKind::EdgeConv, AggregatorKind::NetVlad);
        assert_eq!(v.final_width, 32);
        assert_eq!(pipeline_config(&v, ExtractorKind::PointNet, AggregatorKind::MaxPool).final_width, 256);
        let fc = variant_config(&base, ExtractorKind::PointNet, AggregatorKind::MaxPool, Variant::Fc);
        assert_eq!(fc.classifier, ClassifierKind::Fc);
    }
}

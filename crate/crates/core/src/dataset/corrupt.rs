//! Outlier replacement and Gaussian perturbation.
//!
//! Both act on already-normalized clouds and never re-normalize: outliers
//! stay inside the unit ball, perturbed points may leave it.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{derive_seed, Dataset, PointCloudSample};
use crate::error::{Error, Result};

/// Outlier counts swept by the robustness protocol.
pub const OUTLIER_LEVELS: [usize; 8] = [0, 1, 2, 5, 10, 20, 50, 100];
/// Perturbation standard deviations swept by the robustness protocol.
pub const PERTURB_LEVELS: [f64; 6] = [0.0, 0.02, 0.04, 0.06, 0.08, 0.10];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub outlier_count: usize,
    pub perturb_std: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self {
            outlier_count: 0,
            perturb_std: 0.0,
            seed: 0,
        }
    }

    pub fn outliers(count: usize, seed: u64) -> Self {
        Self {
            outlier_count: count,
            perturb_std: 0.0,
            seed,
        }
    }

    pub fn perturb(std: f64, seed: u64) -> Self {
        Self {
            outlier_count: 0,
            perturb_std: std,
            seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.outlier_count == 0 && self.perturb_std == 0.0
    }

    /// Corrupts one sample; `index` selects the sample's random stream.
    pub fn apply(&self, sample: &PointCloudSample, index: u64) -> Result<PointCloudSample> {
        let base = derive_seed(self.seed, index);
        let s = corrupt_outliers(sample, self.outlier_count, derive_seed(base, 0))?;
        corrupt_perturb(&s, self.perturb_std, derive_seed(base, 1))
    }
}

fn uniform_in_ball(rng: &mut impl Rng) -> [f32; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            let r = rng.random::<f64>().cbrt() / n;
            break [(v[0] * r) as f32, (v[1] * r) as f32, (v[2] * r) as f32];
        }
    }
}

/// Replaces `count` distinct points with points uniform in the unit ball.
pub fn corrupt_outliers(sample: &PointCloudSample, count: usize, seed: u64) -> Result<PointCloudSample> {
    if count > sample.len() {
        return Err(Error::Argument(format!(
            "outlier count {count} exceeds the {} points in the sample",
            sample.len()
        )));
    }
    let mut out = sample.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, sample.len(), count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        out.points[i] = uniform_in_ball(&mut rng);
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, std²)` noise to every coordinate; no clipping.
pub fn corrupt_perturb(sample: &PointCloudSample, std: f64, seed: u64) -> Result<PointCloudSample> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Argument(format!("perturbation std must be finite and >= 0, got {std}")));
    }
    let mut out = sample.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, std).expect("validated std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut out.points {
        for c in p.iter_mut() {
            *c = (*c as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    Ok(out)
}

/// The clean set followed by one corrupted copy of every sample.
pub fn build_training_mix(clean: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    let corrupted = clean.corrupted(spec)?;
    let mut samples = clean.samples.clone();
    samples.extend(corrupted.samples);
    Ok(Dataset {
        samples,
        class_names: clean.class_names.clone(),
    })
}

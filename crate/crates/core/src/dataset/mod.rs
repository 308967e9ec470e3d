//! Point-cloud samples: synthesis, normalization, corruption, file formats
//! and batching.

mod batch;
mod corrupt;
mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

pub use batch::{make_batch, Batch, BatchIterator};
pub use corrupt::{
    build_training_mix, corrupt_outliers, corrupt_perturb, CorruptionSpec, OUTLIER_LEVELS, PERTURB_LEVELS,
};
pub use io::{
    load_dataset, load_directory, load_sample, parse_off, parse_xyz, read_blob, read_off, read_xyz, sample_mesh,
    write_blob, write_directory, Mesh, MeshSampling,
};
pub use synth::synthesize;

use crate::error::{Error, Result};

/// Points per mesh before subsampling to the working size.
pub const MESH_SURFACE_POINTS: usize = 10_000;

/// Derives an independent stream seed from a base seed and an index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Cone, Shape::Torus];

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Cone => "cone",
            Shape::Torus => "torus",
        }
    }
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Shape::ALL
            .into_iter()
            .find(|shape| shape.as_str() == s)
            .ok_or_else(|| format!("unknown shape `{s}` (expected sphere, cube, cylinder, cone or torus)"))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An unordered point set with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudSample {
    pub points: Vec<[f32; 3]>,
    pub label: usize,
}

impl PointCloudSample {
    pub fn new(points: Vec<[f32; 3]>, label: usize) -> Self {
        Self { points, label }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_norm(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Subtracts the centroid and scales so the farthest point has norm 1.
pub fn normalize_unit_sphere(sample: &PointCloudSample) -> Result<PointCloudSample> {
    if sample.is_empty() {
        return Err(Error::Degenerate("cannot normalize an empty point set".into()));
    }
    let n = sample.len() as f64;
    let mut centroid = [0f64; 3];
    for p in &sample.points {
        for c in 0..3 {
            centroid[c] += p[c] as f64;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let centered: Vec<[f64; 3]> = sample
        .points
        .iter()
        .map(|p| [p[0] as f64 - centroid[0], p[1] as f64 - centroid[1], p[2] as f64 - centroid[2]])
        .collect();
    let scale = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if scale <= f64::EPSILON {
        return Err(Error::Degenerate("all points coincide; scale is zero".into()));
    }
    let points = centered
        .iter()
        .map(|p| [(p[0] / scale) as f32, (p[1] / scale) as f32, (p[2] / scale) as f32])
        .collect();
    Ok(PointCloudSample::new(points, sample.label))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PointCloudSample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Applies a corruption spec to every sample, each with its own stream.
    pub fn corrupted(&self, spec: &CorruptionSpec) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| spec.apply(s, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            samples,
            class_names: self.class_names.clone(),
        })
    }

    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchIterator<'_>> {
        BatchIterator::new(self, batch_size, shuffle_seed)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Synthetic primitives, normalized, split 80/20 per class.
pub fn synthetic_splits(shapes: &[Shape], per_class: usize, n_points: usize, seed: u64) -> Result<Splits> {
    if n_points < 8 {
        return Err(Error::Argument(format!("synthetic clouds need at least 8 points, got {n_points}")));
    }
    let class_names: Vec<String> = shapes.iter().map(|s| s.to_string()).collect();
    let n_train = per_class * 4 / 5;
    let mut splits = Splits {
        train: Dataset {
            samples: Vec::new(),
            class_names: class_names.clone(),
        },
        test: Dataset {
            samples: Vec::new(),
            class_names,
        },
    };
    for (label, &shape) in shapes.iter().enumerate() {
        for i in 0..per_class {
            let s = synthesize(shape, n_points, derive_seed(seed, (label * per_class + i) as u64));
            let mut s = normalize_unit_sphere(&s)?;
            s.label = label;
            if i < n_train {
                splits.train.samples.push(s);
            } else {
                splits.test.samples.push(s);
            }
        }
    }
    Ok(splits)
}

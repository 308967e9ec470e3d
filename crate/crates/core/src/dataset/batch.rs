use capsnet3d_tensor::{Element, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// A fixed-shape batch: points `[b, n, 3]` plus labels.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub points: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Shuffled fixed-size batches. The trailing partial batch is dropped, so an
/// epoch yields exactly `len / batch_size` batches.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> BatchIterator<'a> {
    /// `shuffle_seed = None` keeps dataset order.
    pub fn new(dataset: &'a Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if let Some(first) = dataset.samples.first() {
            if let Some(bad) = dataset.samples.iter().position(|s| s.len() != first.len()) {
                return Err(Error::Schema(format!(
                    "sample {bad} has {} points, expected {}",
                    dataset.samples[bad].len(),
                    first.len()
                )));
            }
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Self {
            dataset,
            order,
            batch_size,
            pos: 0,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }

    /// Next full batch converted to element type `T`.
    pub fn next_batch<T: Element>(&mut self) -> Option<Batch<T>> {
        if self.pos + self.batch_size > self.order.len() {
            return None;
        }
        let indices = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        Some(make_batch(self.dataset, &indices))
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch<f32>;

    fn next(&mut self) -> Option<Batch<f32>> {
        self.next_batch()
    }
}

/// Assembles the given samples into one batch (any size, including partial).
pub fn make_batch<T: Element>(dataset: &Dataset, indices: &[usize]) -> Batch<T> {
    let n = dataset.samples.get(indices[0]).map_or(0, |s| s.len());
    let mut data = Vec::with_capacity(indices.len() * n * 3);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &dataset.samples[i];
        labels.push(s.label);
        for p in &s.points {
            data.extend(p.iter().map(|&c| T::from_f64_lossy(c as f64)));
        }
    }
    Batch {
        points: Tensor::new(&[indices.len(), n, 3], data).expect("uniform sample sizes"),
        labels,
        indices: indices.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::super::PointCloudSample;
    use super::*;

    fn toy(n: usize) -> Dataset {
        Dataset {
            samples: (0..n)
                .map(|i| PointCloudSample::new(vec![[i as f32, 0.0, 0.0]; 4], i % 3))
                .collect(),
            class_names: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn floor_division_batches() {
        let d = toy(33);
        let it = d.batches(16, Some(1)).unwrap();
        assert_eq!(it.num_batches(), 2);
        assert_eq!(it.count(), 2);
    }

    #[test]
    fn same_seed_same_batches() {
        let d = toy(40);
        let a: Vec<Vec<usize>> = d.batches(8, Some(5)).unwrap().map(|b| b.indices).collect();
        let b: Vec<Vec<usize>> = d.batches(8, Some(5)).unwrap().map(|b| b.indices).collect();
        let c: Vec<Vec<usize>> = d.batches(8, Some(6)).unwrap().map(|b| b.indices).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn emitted_labels_match_dataset_minus_remainder() {
        let d = toy(35);
        let mut it = d.batches(8, Some(2)).unwrap();
        let mut seen = Vec::new();
        let mut labels = Vec::new();
        while let Some(b) = it.next_batch::<f64>() {
            assert_eq!(b.points.shape(), &[8, 4, 3]);
            seen.extend(b.indices);
            labels.extend(b.labels);
        }
        assert_eq!(seen.len(), 32);
        let mut dropped: Vec<usize> = (0..35).filter(|i| !seen.contains(i)).collect();
        assert_eq!(dropped.len(), 3);
        let mut expected: Vec<usize> = (0..35).filter(|i| !dropped.contains(i)).map(|i| i % 3).collect();
        labels.sort_unstable();
        expected.sort_unstable();
        assert_eq!(labels, expected);
        dropped.clear();
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(toy(4).batches(0, None).is_err());
    }
}

//! Symmetric aggregators collapsing `[b, n, d]` per-point features into one
//! vector per sample: max pooling and NetVLAD.

use capsnet3d_tensor::{Element, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AggregatorKind, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};

pub const KMEANS_ITERATIONS: usize = 25;
/// Sharpness of the initial soft assignment.
pub const VLAD_ALPHA: f64 = 10.0;

pub fn maxpool_aggregate<T: Element>(ctx: &mut Ctx<'_, T>, features: Var) -> Result<Var> {
    Ok(ctx.g.max(features, 1, false)?)
}

/// Soft-assigned residual aggregation `[b, n, d] -> [b, k·d]`.
///
/// `a_k(x) = softmax_k(w_k·x + b_k)`, `V(k) = Σ_i a_k(x_i)(x_i − c_k)`, then
/// optional per-cluster L2 normalization and a global L2 normalization.
pub fn vlad_aggregate<T: Element>(ctx: &mut Ctx<'_, T>, features: Var, intra_norm: bool) -> Result<Var> {
    let &[b, n, d] = ctx.g.shape(features) else {
        return Err(Error::Argument("vlad input must be [b, n, d]".into()));
    };
    let centers = ctx.param("aggregator.centers")?;
    let k = ctx.g.shape(centers)[0];
    if ctx.g.shape(centers)[1] != d {
        return Err(Error::config(
            "final_width",
            format!("features have {d} channels but cluster centers have {}", ctx.g.shape(centers)[1]),
        ));
    }
    let rows = ctx.g.reshape(features, &[b * n, d])?;
    let logits = ctx.dense(rows, "aggregator.assign", true)?;
    let assign = ctx.g.softmax(logits, 1)?;
    let assign = ctx.g.reshape(assign, &[b, n, k])?;
    let assign_t = ctx.g.permute(assign, &[0, 2, 1])?;
    let weighted = ctx.g.bmm(assign_t, features)?;
    let mass = ctx.g.sum(assign, 1, false)?;
    let mass = ctx.g.reshape(mass, &[b, k, 1])?;
    let shifted = ctx.g.mul(mass, centers)?;
    let mut v = ctx.g.sub(weighted, shifted)?;
    let eps = T::from_f64_lossy(1e-9);
    if intra_norm {
        let norm = ctx.g.l2_norm(v, 2, eps, true)?;
        v = ctx.g.div(v, norm)?;
    }
    let flat = ctx.g.reshape(v, &[b, k * d])?;
    let norm = ctx.g.l2_norm(flat, 1, eps, true)?;
    Ok(ctx.g.div(flat, norm)?)
}

pub fn aggregate<T: Element>(ctx: &mut Ctx<'_, T>, features: Var, cfg: &ModelConfig) -> Result<Var> {
    match cfg.aggregator {
        AggregatorKind::MaxPool => maxpool_aggregate(ctx, features),
        AggregatorKind::NetVlad => vlad_aggregate(ctx, features, cfg.vlad_intra_norm),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VladParams {
    /// `[k, d]`
    pub centers: Tensor<f64>,
    /// `[d, k]`, column `k` is `2α c_k`.
    pub weights: Tensor<f64>,
    /// `[k]`, entry `k` is `−α ‖c_k‖²`.
    pub bias: Tensor<f64>,
}

impl VladParams {
    pub fn store_into<T: Element>(&self, store: &mut ParamStore<T>) {
        store.insert_param("aggregator.centers", self.centers.cast());
        store.insert_param("aggregator.assign.w", self.weights.cast());
        store.insert_param("aggregator.assign.b", self.bias.cast());
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's k-means with k-means++ seeding on the rows of `data: [m, d]`.
/// Returns `[k, d]` centers. Empty clusters keep their previous center.
pub fn kmeans(data: &Tensor<f64>, k: usize, iterations: usize, seed: u64) -> Result<Tensor<f64>> {
    let &[m, d] = data.shape() else {
        return Err(Error::Argument("k-means data must be [m, d]".into()));
    };
    let rows: Vec<&[f64]> = data.data().chunks(d.max(1)).collect();
    let mut distinct: Vec<&[f64]> = rows.clone();
    distinct.sort_by(|a, b| a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if k == 0 || k > distinct.len() {
        return Err(Error::Init(format!(
            "cannot place {k} cluster centers on {} distinct feature vectors",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![rows[rng.random_range(0..m)].to_vec()];
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            // guard against float drift landing on an already chosen row
            if nearest[chosen] == 0.0 {
                nearest.iter().position(|&w| w > 0.0).unwrap_or(chosen)
            } else {
                chosen
            }
        } else {
            break;
        };
        let c = rows[pick].to_vec();
        for (w, r) in nearest.iter_mut().zip(&rows) {
            *w = w.min(sq_dist(r, &c));
        }
        centers.push(c);
    }
    let mut assignment = vec![0usize; m];
    for _ in 0..iterations {
        for (a, r) in assignment.iter_mut().zip(&rows) {
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centers.iter().enumerate() {
                let dd = sq_dist(r, c);
                if dd < best.0 {
                    best = (dd, j);
                }
            }
            *a = best.1;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (&a, r) in assignment.iter().zip(&rows) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Ok(Tensor::new(&[k, d], centers.concat())?)
}

/// Cluster centers from k-means over a feature corpus, with assignment
/// parameters `w_k = 2α c_k`, `b_k = −α ‖c_k‖²`.
pub fn vlad_init(corpus: &Tensor<f64>, k: usize, seed: u64) -> Result<VladParams> {
    let centers = kmeans(corpus, k, KMEANS_ITERATIONS, seed)?;
    let d = centers.shape()[1];
    let c = centers.data();
    let weights = Tensor::from_fn(&[d, k], |i| 2.0 * VLAD_ALPHA * c[(i % k) * d + i / k]);
    let bias = Tensor::from_fn(&[k], |j| -VLAD_ALPHA * c[j * d..(j + 1) * d].iter().map(|v| v * v).sum::<f64>());
    Ok(VladParams { centers, weights, bias })
}

#[cfg(test)]
mod tests {
    use capsnet3d_tensor::Graph;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::params::Mode;

    fn features(b: usize, n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, n, d], |_| rng.random_range(-1.0..1.0))
    }

    fn vlad(store: &ParamStore<f64>, f: &Tensor<f64>, intra: bool) -> Tensor<f64> {
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let mut ctx = Ctx::new(&mut g, store, Mode::Eval);
        let v = vlad_aggregate(&mut ctx, x, intra).unwrap();
        ctx.g.value(v).clone()
    }

    fn random_vlad_store(k: usize, d: usize) -> ParamStore<f64> {
        let corpus = features(1, 40, d, 3).reshape(&[40, d]).unwrap();
        let mut store = ParamStore::new();
        vlad_init(&corpus, k, 1).unwrap().store_into(&mut store);
        store
    }

    #[test]
    fn maxpool_single_point_is_identity() {
        let store = ParamStore::<f64>::new();
        let f = features(2, 1, 4, 1);
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let mut ctx = Ctx::new(&mut g, &store, Mode::Eval);
        let y = maxpool_aggregate(&mut ctx, x).unwrap();
        assert_eq!(ctx.g.value(y).data(), f.data());
    }

    #[test]
    fn vlad_is_permutation_invariant_and_unit_norm() {
        let store = random_vlad_store(4, 3);
        let f = features(1, 12, 3, 9);
        let mut rows: Vec<&[f64]> = f.data().chunks(3).collect();
        rows.reverse();
        rows.swap(2, 7);
        let shuffled = Tensor::new(&[1, 12, 3], rows.concat()).unwrap();
        let a = vlad(&store, &f, true);
        let b = vlad(&store, &shuffled, true);
        assert_eq!(a.shape(), &[1, 12]);
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        let norm: f64 = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn point_at_center_has_zero_residual() {
        let mut store = ParamStore::<f64>::new();
        store.insert_param("aggregator.centers", Tensor::from_f64(&[2, 2], &[0.5, 0.5, -3.0, 1.0]).unwrap());
        // hard assignment of everything to cluster 0
        store.insert_param("aggregator.assign.w", Tensor::zeros(&[2, 2]));
        store.insert_param("aggregator.assign.b", Tensor::from_f64(&[2], &[0.0, -1e4]).unwrap());
        let f = Tensor::from_f64(&[1, 1, 2], &[0.5, 0.5]).unwrap();
        let out = vlad(&store, &f, false);
        assert!(out.data()[0].abs() < 1e-12 && out.data()[1].abs() < 1e-12);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let data = features(1, 30, 3, 5).reshape(&[30, 3]).unwrap();
        let c = kmeans(&data, 1, KMEANS_ITERATIONS, 0).unwrap();
        for j in 0..3 {
            let mean: f64 = data.data().iter().skip(j).step_by(3).sum::<f64>() / 30.0;
            assert!((c.data()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let means = [[3.0, 3.0], [-3.0, -2.0]];
        let mut data = Vec::new();
        for i in 0..200 {
            let m = means[i % 2];
            data.push(m[0] + noise.sample(&mut rng));
            data.push(m[1] + noise.sample(&mut rng));
        }
        let data = Tensor::new(&[200, 2], data).unwrap();
        let c = kmeans(&data, 2, KMEANS_ITERATIONS, 7).unwrap();
        for m in means {
            let best = c.data().chunks(2).map(|r| sq_dist(r, &m).sqrt()).fold(f64::INFINITY, f64::min);
            assert!(best <= 0.05, "{best}");
        }
    }

    #[test]
    fn vlad_init_is_deterministic_and_checks_k() {
        let data = features(1, 20, 3, 5).reshape(&[20, 3]).unwrap();
        assert_eq!(vlad_init(&data, 4, 3).unwrap(), vlad_init(&data, 4, 3).unwrap());
        let p = vlad_init(&data, 2, 3).unwrap();
        let c = p.centers.data();
        assert!((p.weights.at(&[1, 0]) - 20.0 * c[1]).abs() < 1e-12);
        assert!((p.bias.data()[1] + 10.0 * (c[3] * c[3] + c[4] * c[4] + c[5] * c[5])).abs() < 1e-12);
        let dup = Tensor::from_f64(&[3, 1], &[1.0, 1.0, 2.0]).unwrap();
        assert!(matches!(kmeans(&dup, 3, 5, 0), Err(Error::Init(_))));
    }
}

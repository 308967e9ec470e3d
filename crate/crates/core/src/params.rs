//! Named parameter storage and the per-forward binding context.
//!
//! Parameters live in a [`ParamStore`] keyed by stable dotted paths such as
//! `extractor.mlp1.0.w`. A [`Ctx`] binds them into a [`Graph`] on first use,
//! which lets gradient checks substitute externally owned variables.

use std::collections::BTreeMap;

use capsnet3d_tensor::{Element, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, path: impl Into<String>, value: Tensor<T>) {
        self.params.insert(path.into(), value);
    }

    pub fn insert_buffer(&mut self, path: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(path.into(), value);
    }

    pub fn param(&self, path: &str) -> Result<&Tensor<T>> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Init(format!("missing parameter `{path}`")))
    }

    pub fn param_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::Init(format!("missing parameter `{path}`")))
    }

    pub fn buffer(&self, path: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(path)
            .ok_or_else(|| Error::Init(format!("missing buffer `{path}`")))
    }

    pub fn buffer_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(path)
            .ok_or_else(|| Error::Init(format!("missing buffer `{path}`")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    /// Keeps only the parameters whose path satisfies `keep`.
    pub fn params_retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Folds batch statistics into the running averages:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_bn_stats(&mut self, stats: &[(String, Vec<T>, Vec<T>)], momentum: f64) -> Result<()> {
        let m = T::from_f64_lossy(momentum);
        let one_m = T::one() - m;
        for (prefix, mean, var) in stats {
            for (suffix, batch) in [("mean", mean), ("var", var)] {
                let buf = self.buffer_mut(&format!("{prefix}.{suffix}"))?;
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + one_m * b;
                }
            }
        }
        Ok(())
    }
}

/// Seeded initializers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut self.rng)))
    }

    /// He-normal weights for a `[fan_in, fan_out]` dense layer.
    pub fn he<T: Element>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.normal(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt())
    }

    pub fn seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Dense layer `[fan_in, fan_out]` weights, with an optional zero bias.
pub fn init_dense<T: Element>(store: &mut ParamStore<T>, init: &mut Init, path: &str, fan_in: usize, fan_out: usize, bias: bool) {
    store.insert_param(format!("{path}.w"), init.he(fan_in, fan_out));
    if bias {
        store.insert_param(format!("{path}.b"), Tensor::zeros(&[fan_out]));
    }
}

/// BatchNorm affine parameters and running statistics.
pub fn init_bn<T: Element>(store: &mut ParamStore<T>, path: &str, width: usize) {
    store.insert_param(format!("{path}.gamma"), Tensor::ones(&[width]));
    store.insert_param(format!("{path}.beta"), Tensor::zeros(&[width]));
    store.insert_buffer(format!("{path}.mean"), Tensor::zeros(&[width]));
    store.insert_buffer(format!("{path}.var"), Tensor::ones(&[width]));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds parameters into a graph for one forward pass and records the side
/// effects training needs (BatchNorm statistics).
pub struct Ctx<'a, T: Element> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    track_grads: bool,
    dropout_rng: Option<ChaCha8Rng>,
    bn_stats: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            g,
            store,
            bound: BTreeMap::new(),
            mode,
            track_grads: mode == Mode::Train,
            dropout_rng: None,
            bn_stats: Vec::new(),
        }
    }

    /// Enables dropout with the given stream. Without it dropout is identity.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn with_grads(mut self, track: bool) -> Self {
        self.track_grads = track;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Uses `var` in place of the stored parameter at `path`.
    pub fn bind(&mut self, path: impl Into<String>, var: Var) {
        self.bound.insert(path.into(), var);
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let value = self.store.param(path)?.clone();
        let v = self.g.leaf(value, self.track_grads);
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, path: &str) -> Result<&Tensor<T>> {
        self.store.buffer(path)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound parameter after `backward`.
    pub fn take_grads(&mut self) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        for (path, &v) in &self.bound {
            if let Some(g) = self.g.take_grad(v) {
                out.insert(path.clone(), g);
            }
        }
        out
    }

    pub fn take_bn_stats(&mut self) -> Vec<(String, Vec<T>, Vec<T>)> {
        std::mem::take(&mut self.bn_stats)
    }

    /// `x · W (+ b)` for `x: [r, fan_in]`.
    pub fn dense(&mut self, x: Var, path: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{path}.w"))?;
        let y = self.g.matmul(x, w)?;
        if bias {
            let b = self.param(&format!("{path}.b"))?;
            return Ok(self.g.add(y, b)?);
        }
        Ok(y)
    }

    /// BatchNorm over the rows of `[r, c]`: batch statistics in training,
    /// running averages in evaluation.
    pub fn batch_norm(&mut self, x: Var, path: &str) -> Result<Var> {
        let eps = T::from_f64_lossy(BN_EPS);
        let xhat = match self.mode {
            Mode::Train => {
                let (xhat, stats) = self.g.batch_norm(x, eps)?;
                self.bn_stats.push((path.to_string(), stats.mean, stats.var));
                xhat
            }
            Mode::Eval => {
                let mean = self.store.buffer(&format!("{path}.mean"))?.clone();
                let inv_std = self.store.buffer(&format!("{path}.var"))?.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let width = mean.len();
                let mean = self.g.constant(mean);
                let inv_std = self.g.constant(Tensor::new(&[width], inv_std)?);
                let centered = self.g.sub(x, mean)?;
                self.g.mul(centered, inv_std)?
            }
        };
        let gamma = self.param(&format!("{path}.gamma"))?;
        let beta = self.param(&format!("{path}.beta"))?;
        let y = self.g.mul(xhat, gamma)?;
        Ok(self.g.add(y, beta)?)
    }

    /// Inverted dropout with keep probability `keep`; identity outside
    /// training or without a dropout stream.
    pub fn dropout(&mut self, x: Var, keep: f64) -> Result<Var> {
        if self.mode != Mode::Train || keep >= 1.0 {
            return Ok(x);
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        let scale = T::from_f64_lossy(1.0 / keep);
        let shape = self.g.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { scale } else { T::zero() });
        let mask = self.g.constant(mask);
        Ok(self.g.mul(x, mask)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_substitutes_stored_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.insert_param("a.w", Tensor::ones(&[2, 2]));
        let mut g = Graph::new();
        let external = g.leaf(Tensor::eye(2), true);
        let mut ctx = Ctx::new(&mut g, &store, Mode::Train);
        ctx.bind("a.w", external);
        assert_eq!(ctx.param("a.w").unwrap(), external);
        assert!(ctx.param("b.w").is_err());
    }

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let mut store = ParamStore::<f64>::new();
        init_bn(&mut store, "bn", 2);
        store.buffer_mut("bn.mean").unwrap().data_mut().copy_from_slice(&[1.0, -1.0]);
        store.buffer_mut("bn.var").unwrap().data_mut().copy_from_slice(&[4.0, 1.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[3.0, -1.0]).unwrap());
        let mut ctx = Ctx::new(&mut g, &store, Mode::Eval);
        let y = ctx.batch_norm(x, "bn").unwrap();
        let out = ctx.g.value(y).to_f64_vec();
        assert!((out[0] - 2.0 / (4.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn running_stats_momentum() {
        let mut store = ParamStore::<f64>::new();
        init_bn(&mut store, "bn", 1);
        store
            .update_bn_stats(&[("bn".into(), vec![2.0], vec![3.0])], 0.9)
            .unwrap();
        assert!((store.buffer("bn.mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
        assert!((store.buffer("bn.var").unwrap().data()[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn dropout_only_in_training_with_stream() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[4, 50]));
        let mut eval = Ctx::new(&mut g, &store, Mode::Eval).with_dropout_seed(1);
        assert_eq!(eval.dropout(x, 0.7).unwrap(), x);
        let mut train = Ctx::new(&mut g, &store, Mode::Train);
        assert_eq!(train.dropout(x, 0.7).unwrap(), x);
        let mut train = Ctx::new(&mut g, &store, Mode::Train).with_dropout_seed(1);
        let y = train.dropout(x, 0.7).unwrap();
        let vals = train.g.value(y).to_f64_vec();
        let kept = vals.iter().filter(|&&v| v != 0.0).count();
        assert!((100..180).contains(&kept), "{kept}");
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
    }
}

//! Registered gradient-check cases for every graph operation.
//!
//! Each case draws small random shapes and values from its seed. Inputs to
//! kinked ops (relu, max, chamfer) are spread so a finite-difference step
//! cannot cross a kink.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// A named scalar function plus the inputs to differentiate it at.
pub struct GradcheckCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub func: CaseFn,
}

impl GradcheckCase {
    pub fn new(name: impl Into<String>, inputs: Vec<Tensor<f64>>, func: CaseFn) -> Self {
        Self {
            name: name.into(),
            inputs,
            func,
        }
    }

    pub fn run(&self, opts: &GradcheckOptions) -> Result<GradcheckReport> {
        gradcheck(|g, v| (self.func)(g, v), &self.inputs, opts)
    }
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero: magnitude in `[lo, hi)`, random sign.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values separated by at least 0.05.
pub fn well_separated(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data = order
        .into_iter()
        .map(|k| k as f64 * 0.1 - 0.05 * n as f64 + rng.random_range(0.0..0.05))
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// `sum(out * w)` for a fixed weight tensor, making a scalar out of any op.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

fn dim(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Wraps a non-scalar op with a seeded weighted sum.
fn probe<F>(name: &str, inputs: Vec<Tensor<f64>>, out_shape: Vec<usize>, seed: u64, f: F) -> GradcheckCase
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, &out_shape, -1.0, 1.0);
    GradcheckCase::new(
        name,
        inputs,
        Box::new(move |g, v| {
            let out = f(g, v)?;
            weighted_sum(g, out, &w)
        }),
    )
}

/// One case per registered op, with shapes and values drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<GradcheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();

    let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
    cases.push(probe(
        "matmul",
        vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)],
        vec![m, n],
        seed,
        |g, v| g.matmul(v[0], v[1]),
    ));

    let gsz = dim(r, 1, 3);
    cases.push(probe(
        "bmm",
        vec![uniform(r, &[gsz, m, k], -1.0, 1.0), uniform(r, &[gsz, k, n], -1.0, 1.0)],
        vec![gsz, m, n],
        seed,
        |g, v| g.bmm(v[0], v[1]),
    ));

    let (a0, a1, a2) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
    let full = vec![a0, a1, a2];
    let partial = vec![a0, 1, a2];
    for (name, kind) in [
        ("add", crate::graph::Binary::Add),
        ("sub", crate::graph::Binary::Sub),
        ("mul", crate::graph::Binary::Mul),
        ("div", crate::graph::Binary::Div),
    ] {
        let rhs = if name == "div" {
            Tensor::from_fn(&partial, |_| r.random_range(0.5..1.5))
        } else {
            uniform(r, &partial, -1.0, 1.0)
        };
        cases.push(probe(
            name,
            vec![uniform(r, &full, -1.0, 1.0), rhs],
            full.clone(),
            seed,
            move |g, v| g.binary(v[0], v[1], kind),
        ));
    }
    // suffix broadcast (bias add)
    cases.push(probe(
        "add_suffix",
        vec![uniform(r, &[a0, a2], -1.0, 1.0), uniform(r, &[a2], -1.0, 1.0)],
        vec![a0, a2],
        seed,
        |g, v| g.add(v[0], v[1]),
    ));

    let shape = vec![dim(r, 1, 3), dim(r, 1, 4)];
    cases.push(probe("relu", vec![away_from_zero(r, &shape, 0.05, 1.0)], shape.clone(), seed, |g, v| {
        Ok(g.relu(v[0]))
    }));
    cases.push(probe("sigmoid", vec![uniform(r, &shape, -2.0, 2.0)], shape.clone(), seed, |g, v| {
        Ok(g.sigmoid(v[0]))
    }));
    cases.push(probe("square", vec![uniform(r, &shape, -2.0, 2.0)], shape.clone(), seed, |g, v| {
        Ok(g.square(v[0]))
    }));
    cases.push(probe("sqrt", vec![uniform(r, &shape, 0.5, 2.0)], shape.clone(), seed, |g, v| {
        Ok(g.sqrt(v[0]))
    }));
    cases.push(probe("exp", vec![uniform(r, &shape, -1.0, 1.0)], shape.clone(), seed, |g, v| {
        Ok(g.exp(v[0]))
    }));
    let factor = r.random_range(-2.0..2.0);
    cases.push(probe("scale", vec![uniform(r, &shape, -1.0, 1.0)], shape.clone(), seed, move |g, v| {
        Ok(g.scale(v[0], factor))
    }));
    cases.push(probe("shift", vec![uniform(r, &shape, -1.0, 1.0)], shape.clone(), seed, |g, v| {
        Ok(g.shift(v[0], 0.3))
    }));

    let rs = vec![dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3)];
    let axis = r.random_range(0..3);
    let mut reduced = rs.clone();
    reduced.remove(axis);
    cases.push(probe("sum", vec![uniform(r, &rs, -1.0, 1.0)], reduced.clone(), seed, move |g, v| {
        g.sum(v[0], axis, false)
    }));
    cases.push(probe("mean", vec![uniform(r, &rs, -1.0, 1.0)], reduced.clone(), seed, move |g, v| {
        g.mean(v[0], axis, false)
    }));
    cases.push(probe("max", vec![well_separated(r, &rs)], reduced.clone(), seed, move |g, v| {
        g.max(v[0], axis, false)
    }));
    cases.push(probe("softmax", vec![uniform(r, &rs, -2.0, 2.0)], rs.clone(), seed, move |g, v| {
        g.softmax(v[0], axis)
    }));
    cases.push(probe("log_softmax", vec![uniform(r, &rs, -2.0, 2.0)], rs.clone(), seed, move |g, v| {
        g.log_softmax(v[0], axis)
    }));
    cases.push(probe("l2_norm", vec![away_from_zero(r, &rs, 0.1, 1.0)], reduced, seed, move |g, v| {
        g.l2_norm(v[0], axis, 1e-9, false)
    }));

    let total: usize = rs.iter().product();
    cases.push(probe("reshape", vec![uniform(r, &rs, -1.0, 1.0)], vec![total], seed, move |g, v| {
        g.reshape(v[0], &[total])
    }));
    let mut perm = vec![0usize, 1, 2];
    perm.shuffle(r);
    let pshape: Vec<usize> = perm.iter().map(|&p| rs[p]).collect();
    let perm_c = perm.clone();
    cases.push(probe("permute", vec![uniform(r, &rs, -1.0, 1.0)], pshape, seed, move |g, v| {
        g.permute(v[0], &perm_c)
    }));
    let (c1, c2) = (dim(r, 1, 3), dim(r, 1, 3));
    let rows = dim(r, 1, 3);
    cases.push(probe(
        "concat",
        vec![uniform(r, &[rows, c1], -1.0, 1.0), uniform(r, &[rows, c2], -1.0, 1.0)],
        vec![rows, c1 + c2],
        seed,
        |g, v| g.concat(&[v[0], v[1]], 1),
    ));
    let src_rows = dim(r, 1, 4);
    let index: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.random_range(0..src_rows)).collect();
    let n_idx = index.len();
    cases.push(probe(
        "gather_rows",
        vec![uniform(r, &[src_rows, c1], -1.0, 1.0)],
        vec![n_idx, c1],
        seed,
        move |g, v| g.gather_rows(v[0], &index),
    ));
    let bn_rows = dim(r, 2, 5);
    cases.push(probe(
        "batch_norm",
        vec![uniform(r, &[bn_rows, c2], -1.0, 1.0)],
        vec![bn_rows, c2],
        seed,
        |g, v| g.batch_norm(v[0], 1e-5).map(|(y, _)| y),
    ));
    let (b, na, nb) = (dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 4));
    cases.push(probe(
        "chamfer",
        vec![well_separated(r, &[b, na, 3]), well_separated(r, &[b, nb, 3])],
        vec![b],
        seed,
        |g, v| g.chamfer(v[0], v[1]),
    ));
    cases
}

use std::sync::Arc;

use capsnet3d_tensor::suite::{op_cases, uniform};
use capsnet3d_tensor::{gradcheck, CustomOp, GradcheckOptions, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn every_op_passes_gradcheck_over_many_seeds() {
    let opts = GradcheckOptions::default();
    for seed in 0..25 {
        for case in op_cases(seed) {
            let report = case.run(&opts).unwrap();
            assert!(
                report.max_rel_error <= 1e-4,
                "seed {seed} op {}: rel err {}",
                case.name,
                report.max_rel_error
            );
        }
    }
}

#[test]
fn matmul_sum_matches_finite_differences() {
    let mut r = rng(11);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4, 2], -1.0, 1.0);
    let report = gradcheck(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            g.sum_all(c)
        },
        &[a, b],
        &GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{}", report.max_rel_error);
}

#[test]
fn sigmoid_gradient_matches_finite_differences() {
    let report = gradcheck(
        |g, v| {
            let s = g.sigmoid(v[0]);
            g.sum_all(s)
        },
        &[Tensor::scalar(0.0)],
        &GradcheckOptions::default(),
    )
    .unwrap();
    assert!((report.inputs[0].analytic[0] - 0.25).abs() < 1e-15);
    assert!(report.max_rel_error <= 1e-6);
}

#[test]
fn softmax_jacobian_rows_match_finite_differences() {
    let x = uniform(&mut rng(5), &[5], -2.0, 2.0);
    for row in 0..5 {
        let report = gradcheck(
            move |g, v| {
                let s = g.softmax(v[0], 0)?;
                let pick = g.constant(Tensor::from_fn(&[5], |i| if i == row { 1.0 } else { 0.0 }));
                let p = g.mul(s, pick)?;
                g.sum_all(p)
            },
            &[x.clone()],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "row {row}: {}", report.max_rel_error);
    }
}

#[test]
fn l2_norm_gradient_away_from_origin() {
    let x = uniform(&mut rng(3), &[2, 4], 0.2, 1.0);
    let report = gradcheck(
        |g, v| {
            let n = g.l2_norm(v[0], 1, 1e-9, false)?;
            g.sum_all(n)
        },
        &[x],
        &GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{}", report.max_rel_error);
}

#[test]
fn seeded_forward_backward_is_bit_identical() {
    let run = || {
        let mut r = rng(99);
        let mut g = Graph::<f32>::new();
        let a = g.leaf(uniform(&mut r, &[8, 6], -1.0, 1.0).cast(), true);
        let b = g.leaf(uniform(&mut r, &[6, 5], -1.0, 1.0).cast(), true);
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let m = g.max(s, 0, false).unwrap();
        let loss = g.sum_all(m).unwrap();
        g.backward(loss).unwrap();
        (g.value(loss).clone(), g.grad(a).unwrap().to_vec(), g.grad(b).unwrap().to_vec())
    };
    let (l1, ga1, gb1) = run();
    let (l2, ga2, gb2) = run();
    assert_eq!(l1.data()[0].to_bits(), l2.data()[0].to_bits());
    assert!(ga1.iter().zip(&ga2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(gb1.iter().zip(&gb2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

/// Cube with a deliberately wrong derivative (2x instead of 3x²).
struct BrokenCube;

impl CustomOp<f64> for BrokenCube {
    fn name(&self) -> &str {
        "broken_cube"
    }
    fn forward(&self, inputs: &[&Tensor<f64>]) -> capsnet3d_tensor::Result<Tensor<f64>> {
        Ok(Tensor::from_fn(inputs[0].shape(), |i| inputs[0].data()[i].powi(3)))
    }
    fn backward(&self, inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].data().iter().zip(grad).map(|(x, g)| 2.0 * x * g).collect()]
    }
}

#[test]
fn corrupted_backward_rule_is_caught() {
    let report = gradcheck(
        |g, v| {
            let y = g.custom(Arc::new(BrokenCube), &[v[0]])?;
            g.sum_all(y)
        },
        &[Tensor::new(&[3], vec![0.5, 1.5, -2.0]).unwrap()],
        &GradcheckOptions::default(),
    )
    .unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 0.1);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-30.0f64..30.0, 1..24), cols in 1usize..6) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new(&[rows, cols], values[..rows * cols].to_vec()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t);
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn blob_round_trip_is_exact(values in prop::collection::vec(-1e6f32..1e6, 1..40)) {
        let t = Tensor::new(&[values.len()], values).unwrap();
        let mut buf = Vec::new();
        capsnet3d_tensor::io::write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f32> = capsnet3d_tensor::io::read_tensor(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }
}

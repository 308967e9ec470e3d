use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{PointCloudSample, Shape};

// Unit-scaled primitives: sphere radius 1, cube edge 1, cylinder and cone
// radius 0.5 / height 1, torus radii 0.5 and 0.2. All are centered at the
// origin with the axis of revolution along z.
const HALF_EDGE: f64 = 0.5;
const RADIUS: f64 = 0.5;
const HEIGHT: f64 = 1.0;
const TORUS_MAJOR: f64 = 0.5;
const TORUS_MINOR: f64 = 0.2;

fn disk(rng: &mut impl Rng, radius: f64) -> (f64, f64) {
    let rad = radius * rng.random::<f64>().sqrt();
    let theta = rng.random_range(0.0..2.0 * PI);
    (rad * theta.cos(), rad * theta.sin())
}

fn sample_point(shape: Shape, rng: &mut impl Rng) -> [f64; 3] {
    match shape {
        Shape::Sphere => loop {
            let v: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        },
        Shape::Cube => {
            let face = rng.random_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { HALF_EDGE } else { -HALF_EDGE };
            let mut p = [
                rng.random_range(-HALF_EDGE..HALF_EDGE),
                rng.random_range(-HALF_EDGE..HALF_EDGE),
                rng.random_range(-HALF_EDGE..HALF_EDGE),
            ];
            p[axis] = sign;
            p
        }
        Shape::Cylinder => {
            let side = 2.0 * PI * RADIUS * HEIGHT;
            let cap = PI * RADIUS * RADIUS;
            let u = rng.random_range(0.0..side + 2.0 * cap);
            if u < side {
                let theta = rng.random_range(0.0..2.0 * PI);
                let z = rng.random_range(-HEIGHT / 2.0..HEIGHT / 2.0);
                [RADIUS * theta.cos(), RADIUS * theta.sin(), z]
            } else {
                let (x, y) = disk(rng, RADIUS);
                let z = if u < side + cap { HEIGHT / 2.0 } else { -HEIGHT / 2.0 };
                [x, y, z]
            }
        }
        Shape::Cone => {
            let slant = (RADIUS * RADIUS + HEIGHT * HEIGHT).sqrt();
            let lateral = PI * RADIUS * slant;
            let base = PI * RADIUS * RADIUS;
            if rng.random_range(0.0..lateral + base) < lateral {
                // area up to distance s from the apex grows as s^2
                let s = rng.random::<f64>().sqrt();
                let theta = rng.random_range(0.0..2.0 * PI);
                [
                    RADIUS * s * theta.cos(),
                    RADIUS * s * theta.sin(),
                    HEIGHT / 2.0 - HEIGHT * s,
                ]
            } else {
                let (x, y) = disk(rng, RADIUS);
                [x, y, -HEIGHT / 2.0]
            }
        }
        Shape::Torus => {
            // area element is proportional to (R + r cos θ)
            let theta = loop {
                let theta = rng.random_range(0.0..2.0 * PI);
                let accept = (TORUS_MAJOR + TORUS_MINOR * theta.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.random::<f64>() < accept {
                    break theta;
                }
            };
            let phi = rng.random_range(0.0..2.0 * PI);
            let ring = TORUS_MAJOR + TORUS_MINOR * theta.cos();
            [ring * phi.cos(), ring * phi.sin(), TORUS_MINOR * theta.sin()]
        }
    }
}

/// Uniform surface sample of a unit-scaled primitive, deterministic per seed.
/// The label is left at 0.
pub fn synthesize(shape: Shape, n_points: usize, seed: u64) -> PointCloudSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n_points)
        .map(|_| {
            let p = sample_point(shape, &mut rng);
            [p[0] as f32, p[1] as f32, p[2] as f32]
        })
        .collect();
    PointCloudSample::new(points, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_on_unit_radius() {
        for seed in 0..3 {
            let s = synthesize(Shape::Sphere, 500, seed);
            for p in &s.points {
                let n = p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() <= 1e-6, "{n}");
            }
        }
    }

    #[test]
    fn cube_points_on_a_face() {
        let s = synthesize(Shape::Cube, 500, 9);
        for p in &s.points {
            assert!(p.iter().any(|&c| ((c.abs() as f64) - HALF_EDGE).abs() <= 1e-6), "{p:?}");
            assert!(p.iter().all(|&c| (c.abs() as f64) <= HALF_EDGE + 1e-6));
        }
    }

    #[test]
    fn cylinder_and_cone_surfaces() {
        for p in synthesize(Shape::Cylinder, 400, 1).points {
            let rho = ((p[0] as f64).powi(2) + (p[1] as f64).powi(2)).sqrt();
            let on_side = (rho - RADIUS).abs() < 1e-6;
            let on_cap = ((p[2].abs() as f64) - HEIGHT / 2.0).abs() < 1e-6 && rho <= RADIUS + 1e-6;
            assert!(on_side || on_cap, "{p:?}");
        }
        for p in synthesize(Shape::Cone, 400, 2).points {
            let rho = ((p[0] as f64).powi(2) + (p[1] as f64).powi(2)).sqrt();
            let expected = RADIUS * (HEIGHT / 2.0 - p[2] as f64) / HEIGHT;
            let on_side = (rho - expected).abs() < 1e-6;
            let on_base = ((p[2] as f64) + HEIGHT / 2.0).abs() < 1e-6;
            assert!(on_side || on_base, "{p:?}");
        }
    }

    #[test]
    fn torus_surface() {
        for p in synthesize(Shape::Torus, 300, 3).points {
            let rho = ((p[0] as f64).powi(2) + (p[1] as f64).powi(2)).sqrt();
            let d = ((rho - TORUS_MAJOR).powi(2) + (p[2] as f64).powi(2)).sqrt();
            assert!((d - TORUS_MINOR).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        for shape in Shape::ALL {
            assert_eq!(synthesize(shape, 64, 42), synthesize(shape, 64, 42));
            assert_ne!(synthesize(shape, 64, 42), synthesize(shape, 64, 43));
        }
    }
}

//! Field-service oracles: analytic gradients against central finite
//! differences, and gridded-map accuracy against dense random sampling.

use muonpath::bfield::{default_toroid, FieldMap, ToroidModel};
use nalgebra::Point3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rippled_toroid() -> ToroidModel {
    ToroidModel { ripple: 0.1, ..default_toroid(1.0) }
}

/// Random point inside the annulus, at least `margin` away from every field
/// boundary.
fn interior_point(rng: &mut ChaCha8Rng, model: &ToroidModel, margin: f64) -> Point3<f64> {
    let r = rng.gen_range(model.inner_radius + margin..model.outer_radius - margin);
    let phi = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let z = rng.gen_range(-(model.half_length - margin)..model.half_length - margin);
    Point3::new(r * phi.cos(), r * phi.sin(), z)
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let model = rippled_toroid();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-3;
    for _ in 0..1000 {
        let p = interior_point(&mut rng, &model, 2.0 * h);
        let sample = model.eval(&p);
        let mut max_rel = 0.0f64;
        for j in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[j] += h;
            pm[j] -= h;
            let bp = model.eval(&pp).b;
            let bm = model.eval(&pm).b;
            for i in 0..3 {
                let fd = (bp[i] - bm[i]) / (2.0 * h);
                let scale = sample.b.norm().max(1e-6);
                max_rel = max_rel.max((sample.grad[(i, j)] - fd).abs() / scale);
            }
        }
        assert!(max_rel <= 1e-5, "gradient relative error {max_rel} at {p}");
    }
}

#[test]
fn map_meets_field_knowledge_budget() {
    // 0.1 m grid over a quadrant slab of the annulus: every sampled point must
    // agree with the analytic model within 30 gauss.
    let model = default_toroid(1.0);
    let spacing = [0.1, 0.1, 0.1];
    let origin = Point3::new(0.0, 0.0, -1.0);
    let dims = [103, 103, 21];
    let map = FieldMap::build(&model, origin, spacing, dims, 8 << 20).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut tested = 0;
    while tested < 10_000 {
        let r = rng.gen_range(model.inner_radius + 0.15..model.outer_radius - 0.15);
        let phi = rng.gen_range(0.05..std::f64::consts::FRAC_PI_2 - 0.05);
        let z = rng.gen_range(-0.8..0.8);
        let p = Point3::new(r * phi.cos(), r * phi.sin(), z);
        if p.x > 10.0 || p.y > 10.0 {
            continue;
        }
        tested += 1;
        let err = (map.eval(&p).b - model.eval(&p).b).norm();
        worst = worst.max(err);
    }
    assert!(worst <= 3e-3, "worst map error {worst} T exceeds 30 gauss");
}

#[test]
fn map_error_shrinks_monotonically_with_spacing() {
    let model = default_toroid(1.0);
    let origin = Point3::new(5.05, 0.05, -0.5);
    let mut errors = Vec::new();
    for (spacing, dims) in [(0.4, [9, 9, 4]), (0.2, [17, 17, 7]), (0.1, [33, 33, 13])] {
        let map = FieldMap::build(&model, origin, [spacing; 3], dims, 1 << 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst = 0.0f64;
        for _ in 0..2000 {
            let p = Point3::new(
                rng.gen_range(origin.x + 0.01..origin.x + 2.8),
                rng.gen_range(origin.y + 0.01..origin.y + 2.8),
                rng.gen_range(origin.z + 0.01..origin.z + 1.1),
            );
            if !model.contains(&p) {
                continue;
            }
            worst = worst.max((map.eval(&p).b - model.eval(&p).b).norm());
        }
        errors.push(worst);
    }
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "refinement not monotone: {errors:?}");
}

#[test]
fn map_gradient_consistent_with_own_finite_differences() {
    // The trilinear gradient is the derivative of the interpolant itself:
    // within one cell it matches finite differences of eval to near machine
    // precision.
    let model = default_toroid(1.0);
    let map = FieldMap::build(&model, Point3::new(5.0, 0.0, -1.0), [0.25; 3], [16, 16, 9], 1 << 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        // Stay well inside one cell so the stencil never crosses a face.
        let cell = [rng.gen_range(2..13usize), rng.gen_range(2..13usize), rng.gen_range(1..7usize)];
        let p = Point3::new(
            5.0 + (cell[0] as f64 + rng.gen_range(0.1..0.9)) * 0.25,
            0.0 + (cell[1] as f64 + rng.gen_range(0.1..0.9)) * 0.25,
            -1.0 + (cell[2] as f64 + rng.gen_range(0.1..0.9)) * 0.25,
        );
        let s = map.eval(&p);
        if s.b == nalgebra::Vector3::zeros() {
            continue;
        }
        let h = 1e-4; // well inside one 0.25 m cell
        for j in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[j] += h;
            pm[j] -= h;
            let fd = (map.eval(&pp).b - map.eval(&pm).b) / (2.0 * h);
            for i in 0..3 {
                assert!(
                    (s.grad[(i, j)] - fd[i]).abs() <= 1e-10 * (1.0 + s.grad[(i, j)].abs()),
                    "grad[({i},{j})] {} vs fd {}",
                    s.grad[(i, j)],
                    fd[i]
                );
            }
        }
    }
}

//! Projection correctness against dense oracles on small instances.

mod common;

use common::*;
use mcnet_core::measurement::{LinearOperator, MeasurementModel, OperatorKind};
use mcnet_core::tensor::{ImageTensor, PaddingMode};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> ImageTensor<f64> {
    ImageTensor::new(h, w, 1, (0..h * w).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn small_model(rng: &mut ChaCha8Rng, eps: f64) -> MeasurementModel<f64> {
    // <= 16-pixel HR instances: 4x4 at scale 2.
    let kind = if rng.gen_bool(0.5) {
        OperatorKind::BoxDownsample { scale: 2 }
    } else {
        OperatorKind::bicubic(2)
    };
    let boundary = if rng.gen_bool(0.5) {
        PaddingMode::Circular
    } else {
        PaddingMode::Replicate
    };
    let op = LinearOperator::new(kind, boundary, 4, 4).unwrap();
    let b = random_image(rng, 2, 2, 0.0, 1.0);
    MeasurementModel::new(op, b, eps).unwrap()
}

#[test]
fn affine_projection_matches_dense_pseudo_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..120 {
        let model = small_model(&mut rng, 0.0);
        let a = dense_operator(&model);
        let q = random_image(&mut rng, 4, 4, -0.5, 1.5);
        let got = model.project_affine(&q).unwrap();
        let want = dense_project_affine(&a, model.b().as_slice(), q.as_slice());
        let err = vec_norm(&vec_sub(got.as_slice(), &want));
        assert!(err <= 1e-8 * (1.0 + vec_norm(&want)), "err {err}");
    }
}

#[test]
fn ball_projection_matches_dense_kkt_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for trial in 0..120 {
        let eps = rng.gen_range(0.02..0.5);
        let model = small_model(&mut rng, eps);
        let a = dense_operator(&model);
        // Mix interior and exterior points.
        let q = if trial % 4 == 0 {
            model
                .project_affine(&random_image(&mut rng, 4, 4, 0.0, 1.0))
                .unwrap()
        } else {
            random_image(&mut rng, 4, 4, -0.5, 1.5)
        };
        let got = model.project_ball(&q).unwrap();
        let want = dense_project_ball(&a, model.b().as_slice(), q.as_slice(), eps);
        let err = vec_norm(&vec_sub(got.as_slice(), &want));
        assert!(
            err <= 1e-6 * (1.0 + vec_norm(&want)),
            "trial {trial}: err {err}"
        );
        // Feasibility with slack.
        assert!(model.fidelity(&got).unwrap() <= eps + 1e-6);
    }
}

#[test]
fn ball_projection_approaches_affine_as_eps_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..20 {
        let model0 = small_model(&mut rng, 0.0);
        let q = random_image(&mut rng, 4, 4, -0.5, 1.5);
        let affine = model0.project_affine(&q).unwrap();
        let tiny =
            MeasurementModel::new(model0.operator().clone(), model0.b().clone(), 1e-9).unwrap();
        let ball = tiny.project_ball(&q).unwrap();
        let err = ball.sub(&affine).norm2();
        assert!(err <= 1e-6 * (1.0 + affine.norm2()), "err {err}");
    }
}

#[test]
fn projections_are_idempotent_and_nonexpansive() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for trial in 0..100 {
        let eps = if trial % 2 == 0 {
            0.0
        } else {
            rng.gen_range(0.05..0.4)
        };
        let model = small_model(&mut rng, eps);
        let q1 = random_image(&mut rng, 4, 4, -0.5, 1.5);
        let q2 = random_image(&mut rng, 4, 4, -0.5, 1.5);
        let p1 = model.project(&q1).unwrap();
        let p2 = model.project(&q2).unwrap();
        // Idempotence.
        let pp1 = model.project(&p1).unwrap();
        assert!(pp1.sub(&p1).norm2() <= 1e-6 * (1.0 + p1.norm2()));
        // Nonexpansiveness.
        let din = q1.sub(&q2).norm2();
        let dout = p1.sub(&p2).norm2();
        assert!(dout <= din + 1e-8, "expansion {dout} > {din}");
        // Feasibility.
        assert!(model.fidelity(&p1).unwrap() <= eps + 1e-6);
    }
}

#[test]
fn affine_optimality_against_null_space_basis() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..30 {
        let model = small_model(&mut rng, 0.0);
        let a = dense_operator(&model);
        let basis = null_space_basis(&a);
        assert!(!basis.is_empty());
        let q = random_image(&mut rng, 4, 4, -0.5, 1.5);
        let p = model.project_affine(&q).unwrap();
        let step = p.sub(&q);
        // The correction p - q lies in range(A^T): orthogonal to null(A).
        for v in &basis {
            let d: f64 = step
                .as_slice()
                .iter()
                .zip(v.iter())
                .map(|(x, y)| x * y)
                .sum();
            assert!(d.abs() < 1e-9, "null-space leakage {d}");
        }
    }
}

#[test]
fn projection_vjp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let h = 1e-6;
    for trial in 0..40 {
        let eps = if trial % 2 == 0 {
            0.0
        } else {
            rng.gen_range(0.05..0.3)
        };
        let model = small_model(&mut rng, eps);
        let q = random_image(&mut rng, 4, 4, -0.5, 1.5);
        if eps > 0.0 {
            // Stay away from the ball boundary where the Jacobian jumps.
            let r = model.fidelity(&q).unwrap();
            if (r - eps).abs() < 0.05 {
                continue;
            }
        }
        let cot = random_image(&mut rng, 4, 4, -1.0, 1.0);
        let dir = random_image(&mut rng, 4, 4, -1.0, 1.0);
        let vjp = model.projection_vjp(&q, &cot).unwrap();
        let analytic = vjp.dot(&dir);

        let mut qp = q.clone();
        qp.axpy(h, &dir);
        let mut qm = q.clone();
        qm.axpy(-h, &dir);
        let fp = model.project(&qp).unwrap().dot(&cot);
        let fm = model.project(&qm).unwrap().dot(&cot);
        let fd = (fp - fm) / (2.0 * h);
        assert!(
            (analytic - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
            "trial {trial} (eps {eps}): {analytic} vs {fd}"
        );
    }
}

#[test]
fn vjp_at_ball_boundary_uses_identity_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let model = small_model(&mut rng, 0.2);
    // Construct q exactly on the boundary: project an exterior point.
    let q_out = random_image(&mut rng, 4, 4, 1.0, 2.0);
    let q_boundary = model.project_ball(&q_out).unwrap();
    let r = model.fidelity(&q_boundary).unwrap();
    assert!(r <= 0.2 + 1e-6);
    let cot = random_image(&mut rng, 4, 4, -1.0, 1.0);
    let vjp = model.projection_vjp(&q_boundary, &cot).unwrap();
    assert_eq!(vjp, cot);
}

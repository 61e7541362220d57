//! ADMM / Douglas-Rachford equivalence machinery shared by the splitting and
//! acceptance suites.

use mcnet_core::denoiser::DenoiserParams;
use mcnet_core::fixedpoint::drs_step;
use mcnet_core::layer::{f_theta_step, FixedPointState, ImplicitLayerConfig};
use mcnet_core::measurement::{LinearOperator, MeasurementModel, OperatorKind};
use mcnet_core::tensor::{ImageTensor, PaddingMode};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Setup {
    pub model: MeasurementModel<f64>,
    pub denoiser: DenoiserParams<f64>,
    pub cfg: ImplicitLayerConfig<f64>,
    pub w: ImageTensor<f64>,
    pub x0: ImageTensor<f64>,
    pub lambda0: ImageTensor<f64>,
}

pub fn build(rng: &mut ChaCha8Rng, beta: f64) -> Setup {
    let op = LinearOperator::new(
        OperatorKind::BoxDownsample { scale: 2 },
        PaddingMode::Circular,
        4,
        4,
    )
    .unwrap();
    let truth =
        ImageTensor::new(4, 4, 1, (0..16).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
    let b = op.apply(&truth).unwrap();
    let model = MeasurementModel::new(op, b, 0.0).unwrap();
    let denoiser = DenoiserParams::perturbed_identity(2, 3, (4, 4), 0.05, rng).unwrap();
    let cfg = ImplicitLayerConfig::new(beta, 1.0).unwrap();
    let w = ImageTensor::new(4, 4, 1, (0..16).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
    let x0 = ImageTensor::new(4, 4, 1, (0..16).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let lambda0 =
        ImageTensor::new(4, 4, 1, (0..16).map(|_| rng.gen_range(-0.2..0.2)).collect()).unwrap();
    Setup {
        model,
        denoiser,
        cfg,
        w,
        x0,
        lambda0,
    }
}

/// Run both recursions for `steps` steps and return the max deviation of the
/// DRS-extracted x-sequence from the ADMM x-sequence.
///
/// `conjugated = true` drives the written splitting form (denoiser reflected
/// first, projection-type operator outside) on the reflected variable; this
/// requires the outer reflection to be an involution, which holds exactly for
/// beta = 0. `conjugated = false` drives the same step with the operators in
/// swapped slots, which is the direct transcription of the update ordering
/// and exact for every beta.
pub fn max_deviation(setup: &Setup, steps: usize, conjugated: bool) -> f64 {
    let Setup {
        model,
        denoiser,
        cfg,
        w,
        x0,
        lambda0,
    } = setup;
    let rho = cfg.rho;
    let beta = cfg.beta;
    let denom = beta + rho;

    // prox of the quadratic-plus-indicator term: the projection applied to
    // the beta-weighted average (plain projection when beta = 0).
    let prox_h = |v: &ImageTensor<f64>| -> ImageTensor<f64> {
        let inner = w.scale(beta / denom).add(&v.scale(rho / denom));
        model.project(&inner).unwrap()
    };
    let prox_f = |v: &ImageTensor<f64>| -> ImageTensor<f64> { denoiser.apply(v).unwrap() };

    // ADMM trajectory via the layer's step.
    let mut admm_x = Vec::with_capacity(steps);
    let mut state = FixedPointState::new(x0.clone(), lambda0.clone()).unwrap();
    for _ in 0..steps {
        let (next, _) = f_theta_step(&state, cfg, model, denoiser, w).unwrap();
        admm_x.push(next.x.clone());
        state = next;
    }

    // Splitting variable: y0 = R(x0 + lambda0) - lambda0.
    let y0 = prox_f(&x0.add(lambda0)).sub(lambda0);
    let template = x0.clone();
    let denoise_slot = |v: &[f64]| -> mcnet_core::Result<Vec<f64>> {
        Ok(prox_f(&template.like_from_vec(v.to_vec())?).into_vec())
    };
    let project_slot = |v: &[f64]| -> mcnet_core::Result<Vec<f64>> {
        Ok(prox_h(&template.like_from_vec(v.to_vec())?).into_vec())
    };

    let mut y = if conjugated {
        // Reflect once so the denoiser-inside composition reproduces the
        // trajectory.
        prox_h(&y0).scale(2.0).sub(&y0)
    } else {
        y0
    };
    let mut worst = 0.0f64;
    for x_admm in admm_x.iter().take(steps) {
        let x_drs = prox_h(&template.like_from_vec(y.as_slice().to_vec()).unwrap());
        let dev = x_drs.sub(x_admm).norm2();
        worst = worst.max(dev);
        let flat = if conjugated {
            drs_step(denoise_slot, project_slot, y.as_slice()).unwrap()
        } else {
            drs_step(project_slot, denoise_slot, y.as_slice()).unwrap()
        };
        y = template.like_from_vec(flat).unwrap();
    }
    worst
}

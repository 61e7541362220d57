//! Instance builders and independent gradient oracles (finite differences,
//! unrolled backpropagation) shared by the gradient and acceptance suites.

use mcnet_core::denoiser::DenoiserParams;
use mcnet_core::fixedpoint::SolverConfig;
use mcnet_core::layer::{self, f_theta_step, ImplicitLayerConfig};
use mcnet_core::measurement::{LinearOperator, MeasurementModel, OperatorKind};
use mcnet_core::tensor::{ImageTensor, PaddingMode};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub model: MeasurementModel<f64>,
    pub denoiser: DenoiserParams<f64>,
    pub cfg: ImplicitLayerConfig<f64>,
    pub w: ImageTensor<f64>,
    pub target: ImageTensor<f64>,
}

pub fn random_instance(rng: &mut ChaCha8Rng, eps: f64) -> Instance {
    let op = LinearOperator::new(
        OperatorKind::BoxDownsample { scale: 2 },
        PaddingMode::Circular,
        8,
        8,
    )
    .unwrap();
    let truth =
        ImageTensor::new(8, 8, 1, (0..64).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
    let b = op.apply(&truth).unwrap();
    let model = MeasurementModel::new(op, b, eps).unwrap();
    // Miniature denoiser: 2 layers, 4 hidden channels, contractive start with
    // mixed ReLU masks.
    let denoiser = DenoiserParams::perturbed_identity(2, 4, (8, 8), 0.08, rng).unwrap();
    let mut cfg = ImplicitLayerConfig::new(rng.gen_range(0.3..2.0), 1.0).unwrap();
    cfg.forward = SolverConfig::default().with_budget(600, 1e-11);
    cfg.backward = SolverConfig::default().with_budget(400, 1e-11);
    let w = ImageTensor::new(8, 8, 1, (0..64).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
    let target = truth;
    Instance {
        model,
        denoiser,
        cfg,
        w,
        target,
    }
}

fn loss_of(inst: &Instance, denoiser: &DenoiserParams<f64>, beta: f64) -> f64 {
    let cfg = ImplicitLayerConfig {
        beta,
        ..inst.cfg.clone()
    };
    let (x_hat, _, _) = layer::forward(&inst.model, denoiser, &cfg, &inst.w, None).unwrap();
    layer::mse_loss_grad(&x_hat, &inst.target).unwrap().0
}

pub fn implicit_gradients(inst: &Instance) -> Option<(Vec<f64>, f64, ImageTensor<f64>)> {
    let (x_hat, z_inf, _) =
        layer::forward(&inst.model, &inst.denoiser, &inst.cfg, &inst.w, None).ok()?;
    let (_, grad) = layer::mse_loss_grad(&x_hat, &inst.target).unwrap();
    let grads = layer::backward(
        &inst.model,
        &inst.denoiser,
        &inst.cfg,
        &inst.w,
        &z_inf,
        &grad,
    )
    .unwrap();
    Some((grads.d_theta.flatten(), grads.d_beta, grads.d_w))
}

/// Finite-difference gradient over every denoiser weight plus beta.
pub fn fd_gradients(inst: &Instance, h: f64) -> (Vec<f64>, f64) {
    let flat = inst.denoiser.flatten();
    let mut d_theta = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut dp = inst.denoiser.clone();
        let mut fp = flat.clone();
        fp[i] += h;
        dp.set_from_flat(&fp).unwrap();
        let mut dm = inst.denoiser.clone();
        let mut fm = flat.clone();
        fm[i] -= h;
        dm.set_from_flat(&fm).unwrap();
        let beta = inst.cfg.beta;
        d_theta.push((loss_of(inst, &dp, beta) - loss_of(inst, &dm, beta)) / (2.0 * h));
    }
    let d_beta = (loss_of(inst, &inst.denoiser, inst.cfg.beta + h)
        - loss_of(inst, &inst.denoiser, inst.cfg.beta - h))
        / (2.0 * h);
    (d_theta, d_beta)
}

/// Unrolled backpropagation through `steps` Picard iterations, assembled from
/// the same per-step VJP machinery the implicit pass uses.
pub fn unrolled_gradients(inst: &Instance, steps: usize) -> (Vec<f64>, f64, f64) {
    let model = &inst.model;
    let den = &inst.denoiser;
    let cfg = &inst.cfg;
    let w = &inst.w;
    let rho_frac = cfg.rho / (cfg.beta + cfg.rho);
    let denom = cfg.beta + cfg.rho;

    // Forward: record every state.
    let mut states = Vec::with_capacity(steps + 1);
    states.push(layer::default_init(model, w).unwrap());
    for _ in 0..steps {
        let (next, _) = f_theta_step(states.last().unwrap(), cfg, model, den, w).unwrap();
        states.push(next);
    }
    let x_last = states.last().unwrap().x.clone();
    let tail_residual = {
        let last = states.last().unwrap();
        let prev = &states[states.len() - 2];
        let dx = last.x.sub(&prev.x);
        let dl = last.lambda.sub(&prev.lambda);
        let num = (dx.dot(&dx) + dl.dot(&dl)).sqrt();
        let zn = (prev.x.dot(&prev.x) + prev.lambda.dot(&prev.lambda)).sqrt();
        num / (zn + 1.0)
    };
    let (_, loss_grad) = layer::mse_loss_grad(&x_last, &inst.target).unwrap();

    // Reverse sweep.
    let zero = ImageTensor::zeros(8, 8, 1);
    let mut s_x = loss_grad;
    let mut s_l = zero.clone();
    let mut d_theta = vec![0.0f64; den.param_count()];
    let mut d_beta = 0.0f64;
    for k in (0..steps).rev() {
        let state = &states[k];
        // Recompute the step intermediates (tape) at this iterate.
        let p = state.x.add(&state.lambda);
        let (u, tape) = den.forward(&p).unwrap();
        let q = w
            .scale(cfg.beta / denom)
            .add(&u.sub(&state.lambda).scale(rho_frac));

        let bar_x_next = s_x.add(&s_l);
        let g_q = model.projection_vjp(&q, &bar_x_next).unwrap();
        let mut g_u = g_q.scale(rho_frac);
        g_u.axpy(-1.0, &s_l);

        // Parameter contributions at this step.
        let step_theta = den.vjp_params(&tape, &g_u).unwrap().flatten();
        for (acc, g) in d_theta.iter_mut().zip(step_theta.iter()) {
            *acc += g;
        }
        let dq_dbeta = w.sub(&q).scale(1.0 / denom);
        d_beta += g_q.dot(&dq_dbeta);

        // State cotangents for the previous iterate.
        let g_p = den.vjp_input(&tape, &g_u).unwrap();
        let mut new_sl = s_l.clone();
        new_sl.axpy(-rho_frac, &g_q);
        new_sl.axpy(1.0, &g_p);
        s_x = g_p;
        s_l = new_sl;
    }
    (d_theta, d_beta, tail_residual)
}

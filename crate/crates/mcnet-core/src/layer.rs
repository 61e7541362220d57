//! The measurement-consistent implicit layer.
//!
//! One step of the ADMM recursion, with the proximal step replaced by the
//! learned denoiser `R`:
//!
//! ```text
//! u  = R(x + lambda)
//! q  = (beta w + rho (u - lambda)) / (beta + rho)
//! x+ = Proj_S(q)
//! l+ = lambda - u + x+
//! ```
//!
//! The forward pass solves `z = F(z)` for the joint variable `z = (x, lambda)`
//! with Anderson acceleration. The backward pass never unrolls: it solves the
//! adjoint fixed point `s = [dF/dz]^T s + dl/dz` at the solution, assembling
//! each Jacobian-transpose product from the projection VJP, the denoiser VJP,
//! and the affine structure of the step, then reads parameter gradients off
//! `s`.

use crate::denoiser::{DenoiserGradient, DenoiserParams, DenoiserTape};
use crate::error::{Error, Result};
use crate::fixedpoint::{solve_anderson, FixedPointProblem, SolveReport, SolverConfig};
use crate::measurement::MeasurementModel;
use crate::scalar::{cast, Scalar};
use crate::tensor::ImageTensor;

/// Layer configuration: trade-off weight, ADMM parameter, solver budgets.
/// `beta = 0` drops fidelity to `w` entirely (the plug-and-play baseline);
/// training keeps `beta > 0` and optimizes it in the log domain.
#[derive(Debug, Clone)]
pub struct ImplicitLayerConfig<T: Scalar> {
    pub beta: T,
    pub rho: T,
    pub forward: SolverConfig,
    pub backward: SolverConfig,
}

impl<T: Scalar> ImplicitLayerConfig<T> {
    pub fn new(beta: T, rho: T) -> Result<Self> {
        let cfg = Self {
            beta,
            rho,
            forward: SolverConfig::default().with_budget(200, 1e-6),
            backward: SolverConfig::default().with_budget(80, 1e-6),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < T::zero() || !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite and >= 0".into()));
        }
        if self.rho <= T::zero() {
            return Err(Error::Config("rho must be > 0".into()));
        }
        self.forward.validate()?;
        self.backward.validate()
    }

    pub fn with_beta(mut self, beta: T) -> Self {
        self.beta = beta;
        self
    }
}

/// Joint iterate of the fixed-point map.
#[derive(Debug, Clone)]
pub struct FixedPointState<T: Scalar> {
    pub x: ImageTensor<T>,
    pub lambda: ImageTensor<T>,
}

impl<T: Scalar> FixedPointState<T> {
    pub fn new(x: ImageTensor<T>, lambda: ImageTensor<T>) -> Result<Self> {
        if !x.same_shape(&lambda) {
            return Err(Error::dimension("x and lambda must share a shape"));
        }
        Ok(Self { x, lambda })
    }

    pub fn pack(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(2 * self.x.len());
        out.extend_from_slice(self.x.as_slice());
        out.extend_from_slice(self.lambda.as_slice());
        out
    }

    pub fn unpack(template: &ImageTensor<T>, flat: &[T]) -> Result<Self> {
        let n = template.len();
        if flat.len() != 2 * n {
            return Err(Error::dimension(format!(
                "joint vector has length {}, expected {}",
                flat.len(),
                2 * n
            )));
        }
        Ok(Self {
            x: template.like_from_vec(flat[..n].to_vec())?,
            lambda: template.like_from_vec(flat[n..].to_vec())?,
        })
    }
}

/// Intermediates of one step, cached for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache<T: Scalar> {
    pub p: ImageTensor<T>,
    pub u: ImageTensor<T>,
    pub q: ImageTensor<T>,
    pub tape: DenoiserTape<T>,
}

/// Gradients produced by the implicit backward pass.
#[derive(Debug, Clone)]
pub struct LayerGradients<T: Scalar> {
    pub d_theta: DenoiserGradient<T>,
    pub d_beta: T,
    pub d_w: ImageTensor<T>,
}

/// One application of the fixed-point map (exact transcription of the ADMM
/// step with the learned proximal replacement).
pub fn f_theta_step<T: Scalar>(
    state: &FixedPointState<T>,
    cfg: &ImplicitLayerConfig<T>,
    model: &MeasurementModel<T>,
    denoiser: &DenoiserParams<T>,
    w: &ImageTensor<T>,
) -> Result<(FixedPointState<T>, StepCache<T>)> {
    let p = state.x.add(&state.lambda);
    let (u, tape) = denoiser.forward(&p)?;
    let denom = cfg.beta + cfg.rho;
    let q = w
        .scale(cfg.beta / denom)
        .add(&u.sub(&state.lambda).scale(cfg.rho / denom));
    let x_next = model.project(&q)?;
    let lambda_next = state.lambda.sub(&u).add(&x_next);
    Ok((
        FixedPointState {
            x: x_next,
            lambda: lambda_next,
        },
        StepCache { p, u, q, tape },
    ))
}

/// Default warm start: the backbone output projected onto the feasible set,
/// with a zero dual variable.
pub fn default_init<T: Scalar>(
    model: &MeasurementModel<T>,
    w: &ImageTensor<T>,
) -> Result<FixedPointState<T>> {
    let x0 = model.project(w)?;
    let lambda0 = ImageTensor::zeros(w.height(), w.width(), w.channels());
    FixedPointState::new(x0, lambda0)
}

fn check_hr_input<T: Scalar>(model: &MeasurementModel<T>, w: &ImageTensor<T>) -> Result<()> {
    let (hh, hw) = model.hr_shape();
    if w.shape() != (hh, hw, 1) {
        return Err(Error::dimension(format!(
            "backbone output shape {:?} does not match HR shape {hh}x{hw}x1",
            w.shape()
        )));
    }
    Ok(())
}

/// Which fixed-point iteration drives the forward solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Picard,
    Anderson,
}

/// Run the forward fixed-point solve and hand back the report regardless of
/// its status (used by diagnostics; [`forward`] adds the status contract).
pub fn run_solver<T: Scalar>(
    model: &MeasurementModel<T>,
    denoiser: &DenoiserParams<T>,
    cfg: &ImplicitLayerConfig<T>,
    w: &ImageTensor<T>,
    z0: Option<FixedPointState<T>>,
    method: SolveMethod,
) -> Result<(FixedPointState<T>, SolveReport<T>)> {
    cfg.validate()?;
    check_hr_input(model, w)?;
    let init = match z0 {
        Some(z) => z,
        None => default_init(model, w)?,
    };
    let template = init.x.clone();
    let problem = FixedPointProblem::new(2 * template.len(), |flat: &[T]| {
        let state = FixedPointState::unpack(&template, flat)?;
        let (next, _) = f_theta_step(&state, cfg, model, denoiser, w)?;
        Ok(next.pack())
    });
    let report = match method {
        SolveMethod::Picard => {
            crate::fixedpoint::solve_picard(&problem, &init.pack(), &cfg.forward)?
        }
        SolveMethod::Anderson => solve_anderson(&problem, &init.pack(), &cfg.forward)?,
    };
    let state = FixedPointState::unpack(&template, &report.solution)?;
    Ok((state, report))
}

/// Forward solve: Anderson acceleration on the joint variable. Returns the
/// reconstruction (the x-component of the fixed point) together with the
/// solver report and the converged joint state for the backward pass.
pub fn forward<T: Scalar>(
    model: &MeasurementModel<T>,
    denoiser: &DenoiserParams<T>,
    cfg: &ImplicitLayerConfig<T>,
    w: &ImageTensor<T>,
    z0: Option<FixedPointState<T>>,
) -> Result<(ImageTensor<T>, FixedPointState<T>, SolveReport<T>)> {
    let (z_end, report) = run_solver(model, denoiser, cfg, w, z0, SolveMethod::Anderson)?;
    match report.status {
        crate::fixedpoint::SolveStatus::Converged => Ok((z_end.x.clone(), z_end, report)),
        crate::fixedpoint::SolveStatus::Diverged => Err(Error::Diverged {
            context: format!(
                "forward solve diverged after {} iterations (min residual {:.3e}, last {:.3e})",
                report.iterations,
                report
                    .residual_history
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min),
                report.final_residual()
            ),
        }),
        crate::fixedpoint::SolveStatus::MaxIters => Err(Error::Solver {
            context: format!(
                "forward solve hit the {}-iteration budget",
                report.iterations
            ),
            residual: report.final_residual(),
        }),
    }
}

/// Pieces shared by every Jacobian-transpose product at the fixed point.
struct AdjointAt<'a, T: Scalar> {
    model: &'a MeasurementModel<T>,
    denoiser: &'a DenoiserParams<T>,
    cfg: &'a ImplicitLayerConfig<T>,
    q_inf: ImageTensor<T>,
    tape: DenoiserTape<T>,
}

impl<'a, T: Scalar> AdjointAt<'a, T> {
    /// `g_q = Proj'(q)^T (s_x + s_lambda)` and `g_u`, `g_p` per the chain
    /// rule through one step. Returns `(g_x, g_lambda, g_q)`.
    fn vjp_state(
        &self,
        s_x: &ImageTensor<T>,
        s_lambda: &ImageTensor<T>,
    ) -> Result<(ImageTensor<T>, ImageTensor<T>, ImageTensor<T>)> {
        let rho_frac = self.cfg.rho / (self.cfg.beta + self.cfg.rho);
        let bar_x_next = s_x.add(s_lambda);
        let g_q = self.model.projection_vjp(&self.q_inf, &bar_x_next)?;
        let mut g_u = g_q.scale(rho_frac);
        g_u.axpy(-T::one(), s_lambda);
        let g_p = self.denoiser.vjp_input(&self.tape, &g_u)?;
        let g_x = g_p.clone();
        let mut g_lambda = s_lambda.clone();
        g_lambda.axpy(-rho_frac, &g_q);
        g_lambda.axpy(T::one(), &g_p);
        Ok((g_x, g_lambda, g_q))
    }

    fn g_u(&self, g_q: &ImageTensor<T>, s_lambda: &ImageTensor<T>) -> ImageTensor<T> {
        let rho_frac = self.cfg.rho / (self.cfg.beta + self.cfg.rho);
        let mut g_u = g_q.scale(rho_frac);
        g_u.axpy(-T::one(), s_lambda);
        g_u
    }
}

/// Implicit backward pass at a converged fixed point.
///
/// Solves `s = [dF/dz]^T s + (loss_grad, 0)` on the joint space with Anderson
/// acceleration, then returns `d_theta = [dF/dtheta]^T s`, the analytic
/// `d_beta` through `dq/dbeta = (w - q) / (beta + rho)`, and `d_w`.
pub fn backward<T: Scalar>(
    model: &MeasurementModel<T>,
    denoiser: &DenoiserParams<T>,
    cfg: &ImplicitLayerConfig<T>,
    w: &ImageTensor<T>,
    z_inf: &FixedPointState<T>,
    loss_grad: &ImageTensor<T>,
) -> Result<LayerGradients<T>> {
    cfg.validate()?;
    check_hr_input(model, w)?;
    if !loss_grad.same_shape(&z_inf.x) {
        return Err(Error::dimension("loss gradient shape mismatch"));
    }

    // Precondition: z_inf actually is a fixed point at the forward tolerance.
    let (next, cache) = f_theta_step(z_inf, cfg, model, denoiser, w)?;
    let residual = {
        let dx = next.x.sub(&z_inf.x);
        let dl = next.lambda.sub(&z_inf.lambda);
        let num = (dx.dot(&dx) + dl.dot(&dl)).sqrt().to_f64_c();
        let zn = (z_inf.x.dot(&z_inf.x) + z_inf.lambda.dot(&z_inf.lambda))
            .sqrt()
            .to_f64_c();
        num / (zn + 1.0)
    };
    if residual > cfg.forward.tol {
        return Err(Error::Precondition(format!(
            "z_inf residual {residual:.3e} exceeds forward tol {:.3e}",
            cfg.forward.tol
        )));
    }

    let adjoint = AdjointAt {
        model,
        denoiser,
        cfg,
        q_inf: cache.q.clone(),
        tape: cache.tape,
    };

    let template = z_inf.x.clone();
    let n = template.len();
    let problem = FixedPointProblem::new(2 * n, |flat: &[T]| {
        let s = FixedPointState::unpack(&template, flat)?;
        let (gx, gl, _) = adjoint.vjp_state(&s.x, &s.lambda)?;
        let mut out = Vec::with_capacity(2 * n);
        for (v, &g) in gx.as_slice().iter().zip(loss_grad.as_slice()) {
            out.push(*v + g);
        }
        out.extend_from_slice(gl.as_slice());
        Ok(out)
    });
    let s0 = vec![T::zero(); 2 * n];
    let report = solve_anderson(&problem, &s0, &cfg.backward)?;
    if !report.converged() {
        return Err(Error::Diverged {
            context: format!(
                "backward solve did not converge ({} iterations, residual {:.3e})",
                report.iterations,
                report.final_residual()
            ),
        });
    }
    let s_inf = FixedPointState::unpack(&template, &report.solution)?;

    // Read the parameter gradients off the adjoint fixed point.
    let (_, _, g_q) = adjoint.vjp_state(&s_inf.x, &s_inf.lambda)?;
    let g_u = adjoint.g_u(&g_q, &s_inf.lambda);
    let d_theta = denoiser.vjp_params(&adjoint.tape, &g_u)?;
    let denom = cfg.beta + cfg.rho;
    let dq_dbeta = w.sub(&adjoint.q_inf).scale(T::one() / denom);
    let d_beta = g_q.dot(&dq_dbeta);
    let d_w = g_q.scale(cfg.beta / denom);

    Ok(LayerGradients {
        d_theta,
        d_beta,
        d_w,
    })
}

/// Plug-and-play ADMM baseline: the same recursion with `beta = 0`, so the
/// backbone output only seeds the initialization.
pub fn pnp_admm_solve<T: Scalar>(
    model: &MeasurementModel<T>,
    denoiser: &DenoiserParams<T>,
    rho: T,
    solver: &SolverConfig,
) -> Result<(ImageTensor<T>, SolveReport<T>)> {
    let w = crate::measurement::bicubic_upsample(model.b(), model.operator().scale())?;
    let cfg = ImplicitLayerConfig {
        beta: T::zero(),
        rho,
        forward: solver.clone(),
        backward: SolverConfig::default(),
    };
    let (x_hat, _, report) = forward(model, denoiser, &cfg, &w, None)?;
    Ok((x_hat, report))
}

/// Power-iteration estimate of the spectral norm of the step Jacobian
/// `dF/dz` at a converged state. Below one, the backward fixed point is
/// guaranteed to converge; reported by the diagnostics command.
pub fn jacobian_spectral_norm<T: Scalar>(
    model: &MeasurementModel<T>,
    denoiser: &DenoiserParams<T>,
    cfg: &ImplicitLayerConfig<T>,
    w: &ImageTensor<T>,
    z_inf: &FixedPointState<T>,
    iters: usize,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    let (_, cache) = f_theta_step(z_inf, cfg, model, denoiser, w)?;
    let rho_frac = cfg.rho / (cfg.beta + cfg.rho);
    let adjoint = AdjointAt {
        model,
        denoiser,
        cfg,
        q_inf: cache.q.clone(),
        tape: cache.tape,
    };

    // Forward-mode product J v with the frozen tape; the projection Jacobian
    // is symmetric, so the same routine serves both directions.
    let jvp =
        |vx: &ImageTensor<T>, vl: &ImageTensor<T>| -> Result<(ImageTensor<T>, ImageTensor<T>)> {
            let d_p = vx.add(vl);
            let d_u = denoiser.jvp_input(&adjoint.tape, &d_p)?;
            let d_q = d_u.sub(vl).scale(rho_frac);
            let d_x = model.projection_vjp(&adjoint.q_inf, &d_q)?;
            let mut d_l = vl.clone();
            d_l.axpy(-T::one(), &d_u);
            d_l.axpy(T::one(), &d_x);
            Ok((d_x, d_l))
        };

    let mut vx = z_inf.x.like_from_vec(
        (0..z_inf.x.len())
            .map(|_| T::from_f64_c(rng.gen_range(-1.0..1.0)))
            .collect(),
    )?;
    let mut vl = z_inf.lambda.like_from_vec(
        (0..z_inf.lambda.len())
            .map(|_| T::from_f64_c(rng.gen_range(-1.0..1.0)))
            .collect(),
    )?;
    let mut sigma = 0.0f64;
    for _ in 0..iters.max(1) {
        let norm = (vx.dot(&vx) + vl.dot(&vl)).sqrt();
        if norm == T::zero() {
            return Ok(0.0);
        }
        vx = vx.scale(T::one() / norm);
        vl = vl.scale(T::one() / norm);
        let (jx, jl) = jvp(&vx, &vl)?;
        sigma = (jx.dot(&jx) + jl.dot(&jl)).sqrt().to_f64_c();
        // v <- J^T (J v)
        let (gx, gl, _) = adjoint.vjp_state(&jx, &jl)?;
        vx = gx;
        vl = gl;
    }
    Ok(sigma)
}

/// Mean-squared-error loss and its gradient with respect to the estimate.
pub fn mse_loss_grad<T: Scalar>(
    x_hat: &ImageTensor<T>,
    target: &ImageTensor<T>,
) -> Result<(f64, ImageTensor<T>)> {
    if !x_hat.same_shape(target) {
        return Err(Error::dimension("loss operands differ in shape"));
    }
    let n = T::from_f64_c(x_hat.len() as f64);
    let diff = x_hat.sub(target);
    let loss = (diff.dot(&diff) / n).to_f64_c();
    let grad = diff.scale(cast::<T>(2.0) / n);
    Ok((loss, grad))
}

/// L1 loss and (sub)gradient, the configurable alternative.
pub fn l1_loss_grad<T: Scalar>(
    x_hat: &ImageTensor<T>,
    target: &ImageTensor<T>,
) -> Result<(f64, ImageTensor<T>)> {
    if !x_hat.same_shape(target) {
        return Err(Error::dimension("loss operands differ in shape"));
    }
    let n = T::from_f64_c(x_hat.len() as f64);
    let diff = x_hat.sub(target);
    let loss = diff
        .as_slice()
        .iter()
        .map(|v| v.abs())
        .sum::<T>()
        .to_f64_c()
        / x_hat.len() as f64;
    let grad = diff.map(|v| {
        if v > T::zero() {
            T::one() / n
        } else if v < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        }
    });
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{LinearOperator, OperatorKind};
    use crate::tensor::{ConvKernel2D, PaddingMode};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(b: f64, eps: f64) -> MeasurementModel<f64> {
        let op = LinearOperator::new(
            OperatorKind::BoxDownsample { scale: 1 },
            PaddingMode::Circular,
            1,
            1,
        )
        .unwrap();
        MeasurementModel::new(op, ImageTensor::from_rows(&[&[b]]), eps).unwrap()
    }

    fn zero_denoiser(probe: (usize, usize)) -> DenoiserParams<f64> {
        DenoiserParams::from_layers(
            vec![
                ConvKernel2D::zeros(3, 3, 1, 2),
                ConvKernel2D::zeros(3, 3, 2, 1),
            ],
            0.98,
            probe,
        )
        .unwrap()
    }

    #[test]
    fn scalar_step_hand_example() {
        // n = m = 1, A = [1], b = 0.5, eps = 0, beta = rho = 1, w = 0.3,
        // zero denoiser, (x, lambda) = (0.2, 0.1):
        // u = 0, q = (0.3 - 0.1)/2 = 0.1, x+ = 0.5, lambda+ = 0.1 - 0 + 0.5 = 0.6.
        let model = scalar_model(0.5, 0.0);
        let cfg = ImplicitLayerConfig::new(1.0, 1.0).unwrap();
        let denoiser = zero_denoiser((1, 1));
        let state = FixedPointState::new(
            ImageTensor::from_rows(&[&[0.2]]),
            ImageTensor::from_rows(&[&[0.1]]),
        )
        .unwrap();
        let w = ImageTensor::from_rows(&[&[0.3]]);
        let (next, cache) = f_theta_step(&state, &cfg, &model, &denoiser, &w).unwrap();
        assert!((cache.q.get(0, 0, 0) - 0.1).abs() < 1e-15);
        assert!((next.x.get(0, 0, 0) - 0.5).abs() < 1e-15);
        assert!((next.lambda.get(0, 0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn step_with_eps_zero_is_always_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let op = LinearOperator::new(
            OperatorKind::BoxDownsample { scale: 2 },
            PaddingMode::Circular,
            8,
            8,
        )
        .unwrap();
        let b =
            ImageTensor::new(4, 4, 1, (0..16).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let model = MeasurementModel::new(op, b, 0.0).unwrap();
        let denoiser = DenoiserParams::random_chain(2, 3, (8, 8), &mut rng).unwrap();
        let cfg = ImplicitLayerConfig::new(0.7, 1.0).unwrap();
        let w =
            ImageTensor::new(8, 8, 1, (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let state = FixedPointState::new(
            ImageTensor::new(8, 8, 1, (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
            ImageTensor::new(8, 8, 1, (0..64).map(|_| rng.gen_range(-0.2..0.2)).collect()).unwrap(),
        )
        .unwrap();
        let (next, _) = f_theta_step(&state, &cfg, &model, &denoiser, &w).unwrap();
        assert!(model.fidelity(&next.x).unwrap() <= 1e-10);
    }

    #[test]
    fn fixed_point_maps_to_itself() {
        // Identity A pins x = b; with an identity-like denoiser the fixed
        // point can be computed by running the iteration to convergence, and
        // one extra step must return the same state.
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let op = LinearOperator::new(
            OperatorKind::BoxDownsample { scale: 1 },
            PaddingMode::Circular,
            6,
            6,
        )
        .unwrap();
        let b =
            ImageTensor::new(6, 6, 1, (0..36).map(|_| rng.gen_range(0.2..0.8)).collect()).unwrap();
        let model = MeasurementModel::new(op, b, 0.0).unwrap();
        let mut denoiser = DenoiserParams::identity_like(3, 2, (6, 6)).unwrap();
        denoiser.normalize_spectral(30);
        let cfg = ImplicitLayerConfig::new(1.0, 1.0).unwrap();
        let w = ImageTensor::new(
            6,
            6,
            1,
            (0..36).map(|_| rng.gen_range(0.2f64..0.8)).collect(),
        )
        .unwrap();
        let (_, z_inf, report) = forward(&model, &denoiser, &cfg, &w, None).unwrap();
        assert!(report.converged());
        let (next, _) = f_theta_step(&z_inf, &cfg, &model, &denoiser, &w).unwrap();
        let drift = next.x.sub(&z_inf.x).norm2() + next.lambda.sub(&z_inf.lambda).norm2();
        assert!(drift.to_f64_c() <= 10.0 * cfg.forward.tol * (1.0 + z_inf.x.norm2()));
    }

    #[test]
    fn identity_problem_returns_target_exactly() {
        // A = I, b = x*: the projection pins the solution regardless of the
        // denoiser or w.
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let op = LinearOperator::new(
            OperatorKind::BoxDownsample { scale: 1 },
            PaddingMode::Circular,
            5,
            5,
        )
        .unwrap();
        let x_star =
            ImageTensor::new(5, 5, 1, (0..25).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let model = MeasurementModel::new(op, x_star.clone(), 0.0).unwrap();
        let mut denoiser = DenoiserParams::identity_like(2, 2, (5, 5)).unwrap();
        denoiser.normalize_spectral(30);
        let cfg = ImplicitLayerConfig::new(1.0, 1.0).unwrap();
        let w =
            ImageTensor::new(5, 5, 1, (0..25).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let (x_hat, _, _) = forward(&model, &denoiser, &cfg, &w, None).unwrap();
        assert!(x_hat.sub(&x_star).norm2() < 1e-9);
    }

    #[test]
    fn large_beta_tracks_feasible_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let op = LinearOperator::new(
            OperatorKind::BoxDownsample { scale: 2 },
            PaddingMode::Circular,
            8,
            8,
        )
        .unwrap();
        let b =
            ImageTensor::new(4, 4, 1, (0..16).map(|_| rng.gen_range(0.2..0.8)).collect()).unwrap();
        let model = MeasurementModel::new(op, b, 0.0).unwrap();
        // Feasible w: project an arbitrary image.
        let w = model
            .project_affine(
                &ImageTensor::new(8, 8, 1, (0..64).map(|_| rng.gen_range(0.2..0.8)).collect())
                    .unwrap(),
            )
            .unwrap();
        let mut denoiser = DenoiserParams::identity_like(3, 2, (8, 8)).unwrap();
        denoiser.normalize_spectral(30);
        let cfg = ImplicitLayerConfig::new(1e6, 1.0).unwrap();
        let (x_hat, _, _) = forward(&model, &denoiser, &cfg, &w, None).unwrap();
        let err = x_hat.sub(&w).norm2();
        assert!(err <= 1e-4, "beta -> inf limit error {err}");
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let op = LinearOperator::new(
            OperatorKind::BoxDownsample { scale: 2 },
            PaddingMode::Circular,
            6,
            6,
        )
        .unwrap();
        let b =
            ImageTensor::new(3, 3, 1, (0..9).map(|_| rng.gen_range(0.2..0.8)).collect()).unwrap();
        let model = MeasurementModel::new(op, b, 0.0).unwrap();
        let denoiser = DenoiserParams::perturbed_identity(2, 3, (6, 6), 0.05, &mut rng).unwrap();
        let cfg = ImplicitLayerConfig::new(1.0, 1.0).unwrap();
        let w = ImageTensor::new(
            6,
            6,
            1,
            (0..36).map(|_| rng.gen_range(0.2f64..0.8)).collect(),
        )
        .unwrap();
        let (_, z_inf, _) = forward(&model, &denoiser, &cfg, &w, None).unwrap();
        let grads = backward(
            &model,
            &denoiser,
            &cfg,
            &w,
            &z_inf,
            &ImageTensor::zeros(6, 6, 1),
        )
        .unwrap();
        assert!(grads.d_theta.norm2() == 0.0);
        assert_eq!(grads.d_beta, 0.0);
        assert!(grads.d_w.norm2() == 0.0);
    }

    #[test]
    fn backward_rejects_non_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let op = LinearOperator::new(
            OperatorKind::BoxDownsample { scale: 2 },
            PaddingMode::Circular,
            6,
            6,
        )
        .unwrap();
        let b =
            ImageTensor::new(3, 3, 1, (0..9).map(|_| rng.gen_range(0.2..0.8)).collect()).unwrap();
        let model = MeasurementModel::new(op, b, 0.0).unwrap();
        let mut denoiser = DenoiserParams::random_chain(2, 3, (6, 6), &mut rng).unwrap();
        denoiser.normalize_spectral(30);
        let cfg = ImplicitLayerConfig::new(1.0, 1.0).unwrap();
        let w = ImageTensor::new(
            6,
            6,
            1,
            (0..36).map(|_| rng.gen_range(0.2f64..0.8)).collect(),
        )
        .unwrap();
        let junk = FixedPointState::new(w.clone(), w.scale(0.5)).unwrap();
        let zero_grad = ImageTensor::<f64>::zeros(6, 6, 1);
        let err = backward(&model, &denoiser, &cfg, &w, &junk, &zero_grad).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn pnp_is_forward_with_beta_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let op = LinearOperator::new(
            OperatorKind::BoxDownsample { scale: 2 },
            PaddingMode::Circular,
            8,
            8,
        )
        .unwrap();
        let b =
            ImageTensor::new(4, 4, 1, (0..16).map(|_| rng.gen_range(0.2..0.8)).collect()).unwrap();
        let model = MeasurementModel::new(op, b, 0.0).unwrap();
        let mut denoiser = DenoiserParams::identity_like(3, 2, (8, 8)).unwrap();
        denoiser.normalize_spectral(30);
        let solver = SolverConfig::default().with_budget(200, 1e-8);
        let (pnp, _) = pnp_admm_solve(&model, &denoiser, 1.0, &solver).unwrap();

        let w = crate::measurement::bicubic_upsample(model.b(), 2).unwrap();
        let cfg = ImplicitLayerConfig {
            beta: 0.0,
            rho: 1.0,
            forward: solver,
            backward: SolverConfig::default(),
        };
        let (direct, _, _) = forward(&model, &denoiser, &cfg, &w, None).unwrap();
        assert!(pnp.sub(&direct).norm2() < 1e-12);
    }

    #[test]
    fn forward_solve_works_in_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let op = LinearOperator::new(
            OperatorKind::BoxDownsample { scale: 2 },
            PaddingMode::Circular,
            8,
            8,
        )
        .unwrap();
        let b = ImageTensor::<f32>::new(
            4,
            4,
            1,
            (0..16).map(|_| rng.gen_range(0.2f64..0.8) as f32).collect(),
        )
        .unwrap();
        let model = MeasurementModel::new(op, b, 0.0f32).unwrap();
        let denoiser =
            DenoiserParams::<f32>::perturbed_identity(2, 3, (8, 8), 0.03, &mut rng).unwrap();
        let mut cfg = ImplicitLayerConfig::new(1.0f32, 1.0).unwrap();
        cfg.forward = crate::fixedpoint::SolverConfig::default().with_budget(200, 1e-5);
        let w = ImageTensor::<f32>::new(
            8,
            8,
            1,
            (0..64).map(|_| rng.gen_range(0.2f64..0.8) as f32).collect(),
        )
        .unwrap();
        let (x_hat, _, report) = forward(&model, &denoiser, &cfg, &w, None).unwrap();
        assert!(report.converged());
        assert!(model.fidelity(&x_hat).unwrap() < 1e-4);
    }

    #[test]
    fn pnp_identity_operator_returns_measurement() {
        // A = I and a denoiser whose fixed point is b itself: the projection
        // pins x = b at every step.
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let op = LinearOperator::new(
            OperatorKind::BoxDownsample { scale: 1 },
            PaddingMode::Circular,
            6,
            6,
        )
        .unwrap();
        let b =
            ImageTensor::new(6, 6, 1, (0..36).map(|_| rng.gen_range(0.2..0.8)).collect()).unwrap();
        let model = MeasurementModel::new(op, b.clone(), 0.0).unwrap();
        let mut denoiser = DenoiserParams::identity_like(2, 2, (6, 6)).unwrap();
        denoiser.normalize_spectral(30);
        let (x, _) = pnp_admm_solve(&model, &denoiser, 1.0, &SolverConfig::default()).unwrap();
        assert!(x.sub(&b).norm2() < 1e-5);
    }
}

//! End-to-end training of the denoiser and the trade-off weight through the
//! implicit layer, plus the pretraining pipeline: Gaussian-noise denoiser
//! pretraining at several noise levels, candidate selection through the
//! plug-and-play baseline, and a coarse grid search for the initial beta.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::PatchDataset;
use crate::denoiser::{gaussian, DenoiserParams};
use crate::error::{Error, Result};
use crate::fixedpoint::SolverConfig;
use crate::layer::{self, ImplicitLayerConfig};
use crate::measurement::OperatorKind;
use crate::metrics::psnr;
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, PaddingMode};

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }

    pub fn update<T: Scalar>(&mut self, params: &mut [T], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let delta = lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            params[i] -= T::from_f64_c(delta);
        }
    }
}

/// Shared training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub sn_iters_step: usize,
    pub seed: u64,
    pub loss: LossKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    L1,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "l1" => Ok(LossKind::L1),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }

    fn eval<T: Scalar>(
        &self,
        x_hat: &ImageTensor<T>,
        target: &ImageTensor<T>,
    ) -> Result<(f64, ImageTensor<T>)> {
        match self {
            LossKind::Mse => layer::mse_loss_grad(x_hat, target),
            LossKind::L1 => layer::l1_loss_grad(x_hat, target),
        }
    }
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-4,
            lr_drop_epoch: 30,
            lr_drop_factor: 0.1,
            sn_iters_step: 5,
            seed: 0,
            loss: LossKind::Mse,
        }
    }
}

impl TrainOptions {
    fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// Per-epoch statistics of an end-to-end training run.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub mean_fidelity: f64,
    pub lipschitz: f64,
    pub skipped: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,train_loss,val_psnr,mean_fidelity,lipschitz,skipped,total\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:e},{:.4},{:e},{:.6},{},{}\n",
                e.epoch, e.train_loss, e.val_psnr, e.mean_fidelity, e.lipschitz, e.skipped, e.total
            ));
        }
        out
    }
}

/// Pretrain one denoiser at a single Gaussian noise level: minimize
/// `MSE(R(y + eta), y)` over HR patches with spectral normalization after
/// every optimizer step. Returns the trained weights and the per-epoch loss
/// trajectory.
pub fn pretrain_denoiser<T: Scalar>(
    mut params: DenoiserParams<T>,
    noise_sigma: f64,
    dataset: &PatchDataset<T>,
    epochs: usize,
    opts: &TrainOptions,
) -> Result<(DenoiserParams<T>, Vec<f64>)> {
    if noise_sigma <= 0.0 {
        return Err(Error::Config("noise_sigma must be > 0".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Training("pretraining dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let dim = params.param_count();
    let mut adam = AdamState::new(dim);
    let mut losses = Vec::with_capacity(epochs);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let lr = opts.lr_at(epoch);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(opts.batch_size.max(1)) {
            // Noise is drawn sequentially from the epoch RNG so runs with the
            // same seed are identical.
            let noisy: Vec<(usize, ImageTensor<T>)> = batch
                .iter()
                .map(|&idx| {
                    let clean = &dataset.items[idx].hr;
                    let mut noisy = clean.clone();
                    for v in noisy.as_mut_slice() {
                        *v += T::from_f64_c(noise_sigma * gaussian(&mut rng));
                    }
                    (idx, noisy)
                })
                .collect();

            let results: Vec<Result<(f64, Vec<T>)>> = noisy
                .par_iter()
                .map(|(idx, noisy)| {
                    let clean = &dataset.items[*idx].hr;
                    let (out, tape) = params.forward(noisy)?;
                    let (loss, grad) = layer::mse_loss_grad(&out, clean)?;
                    let g = params.vjp_params(&tape, &grad)?;
                    Ok((loss, g.flatten()))
                })
                .collect();

            let mut grad_sum = vec![0.0f64; dim];
            let mut batch_loss = 0.0;
            let mut count = 0usize;
            for r in results {
                let (loss, flat) = r?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite pretraining loss at epoch {epoch}"
                    )));
                }
                for (a, b) in grad_sum.iter_mut().zip(flat.iter()) {
                    *a += b.to_f64_c();
                }
                batch_loss += loss;
                count += 1;
            }
            let scale = 1.0 / count as f64;
            for g in &mut grad_sum {
                *g *= scale;
            }
            let mut flat = params.flatten();
            adam.update(&mut flat, &grad_sum, lr);
            params.set_from_flat(&flat)?;
            params.normalize_spectral(opts.sn_iters_step);
            epoch_loss += batch_loss;
            seen += count;
        }
        losses.push(epoch_loss / seen as f64);
    }
    Ok((params, losses))
}

/// Measurement setup, solver budgets, and metric shave shared by the
/// training entry points.
#[derive(Debug, Clone)]
pub struct TrainContext<T: Scalar> {
    pub kind: OperatorKind<T>,
    pub boundary: PaddingMode,
    pub epsilon: T,
    pub rho: T,
    pub forward: SolverConfig,
    pub backward: SolverConfig,
    pub shave: usize,
}

impl<T: Scalar> TrainContext<T> {
    pub fn new(kind: OperatorKind<T>, epsilon: T) -> Self {
        Self {
            kind,
            boundary: PaddingMode::Circular,
            epsilon,
            rho: T::one(),
            forward: SolverConfig::default().with_budget(200, 1e-6),
            backward: SolverConfig::default().with_budget(80, 1e-6),
            shave: 3,
        }
    }
}

/// Evaluate a denoiser through the plug-and-play baseline on a validation set
/// and return its mean PSNR (items whose solve fails score nothing and are
/// counted as failures).
fn pnp_validation_psnr<T: Scalar>(
    denoiser: &DenoiserParams<T>,
    validation: &PatchDataset<T>,
    ctx: &TrainContext<T>,
) -> (f64, usize) {
    let scores: Vec<Option<f64>> = validation
        .items
        .par_iter()
        .map(|item| {
            let model = item.model(&ctx.kind, ctx.boundary, ctx.epsilon).ok()?;
            let (x, _) = layer::pnp_admm_solve(&model, denoiser, ctx.rho, &ctx.forward).ok()?;
            psnr(&item.hr, &x, ctx.shave).ok()
        })
        .collect();
    let ok: Vec<f64> = scores.iter().flatten().copied().collect();
    let failures = scores.len() - ok.len();
    if ok.is_empty() {
        (f64::NEG_INFINITY, failures)
    } else {
        (ok.iter().sum::<f64>() / ok.len() as f64, failures)
    }
}

/// Pick the candidate denoiser with the best plug-and-play validation PSNR
/// (deterministic tie-break toward the lower index).
pub fn select_denoiser<T: Scalar>(
    candidates: Vec<DenoiserParams<T>>,
    validation: &PatchDataset<T>,
    ctx: &TrainContext<T>,
) -> Result<(usize, DenoiserParams<T>, f64)> {
    if candidates.is_empty() {
        return Err(Error::Selection("no candidate denoisers".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, cand) in candidates.iter().enumerate() {
        let (score, _) = pnp_validation_psnr(cand, validation, ctx);
        if score.is_finite() {
            let better = match best {
                None => true,
                Some((_, s)) => score > s,
            };
            if better {
                best = Some((i, score));
            }
        }
    }
    match best {
        Some((i, score)) => Ok((
            i,
            candidates.into_iter().nth(i).expect("index valid"),
            score,
        )),
        None => Err(Error::Selection(
            "every candidate diverged on the validation set".into(),
        )),
    }
}

/// Coarse grid search for the initial trade-off weight: evaluate the layer's
/// forward PSNR for each beta; diverging values score negative infinity; ties
/// break toward the smaller beta.
pub fn grid_search_beta<T: Scalar>(
    denoiser: &DenoiserParams<T>,
    grid: &[T],
    validation: &PatchDataset<T>,
    ctx: &TrainContext<T>,
) -> Result<T> {
    if grid.is_empty() {
        return Err(Error::Config("beta grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite betas"));
    let mut best: Option<(T, f64)> = None;
    for &beta in &sorted {
        let cfg = ImplicitLayerConfig {
            beta,
            rho: ctx.rho,
            forward: ctx.forward.clone(),
            backward: SolverConfig::default(),
        };
        let scores: Vec<Option<f64>> = validation
            .items
            .par_iter()
            .map(|item| {
                let model = item.model(&ctx.kind, ctx.boundary, ctx.epsilon).ok()?;
                let (x, _, _) = layer::forward(&model, denoiser, &cfg, &item.w, None).ok()?;
                psnr(&item.hr, &x, ctx.shave).ok()
            })
            .collect();
        let ok: Vec<f64> = scores.iter().flatten().copied().collect();
        let score = if ok.is_empty() {
            f64::NEG_INFINITY
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        };
        // Strict improvement keeps the smaller beta on ties.
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((beta, score));
        }
    }
    Ok(best.expect("grid nonempty").0)
}

/// Outcome of one training item.
enum ItemOutcome<T: Scalar> {
    Ok {
        loss: f64,
        d_theta: Vec<T>,
        d_logbeta: f64,
    },
    Skipped,
}

/// End-to-end training of `(theta, log beta)` through the implicit layer.
///
/// Per item: forward solve, loss, implicit backward, Adam update of the
/// denoiser weights and of `log beta` (kept in the log domain so beta stays
/// positive), spectral normalization after every step. Items whose forward
/// solve fails to converge are skipped and counted; an epoch that skips more
/// than half its items aborts training, since contraction has likely been
/// lost.
pub fn train_mcnet<T: Scalar>(
    init: DenoiserParams<T>,
    beta0: T,
    train: &PatchDataset<T>,
    val: &PatchDataset<T>,
    ctx: &TrainContext<T>,
    epochs: usize,
    opts: &TrainOptions,
) -> Result<(DenoiserParams<T>, T, AdamState, TrainReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training(
            "training and validation sets must be nonempty".into(),
        ));
    }
    if beta0 <= T::zero() {
        return Err(Error::Config("beta0 must be > 0 for training".into()));
    }
    let mut params = init;
    let mut log_beta = beta0.to_f64_c().ln();
    let n_theta = params.param_count();
    let mut adam = AdamState::new(n_theta + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x51a3_17c9_0000_0001);
    let mut report = TrainReport::default();

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let lr = opts.lr_at(epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_items = 0usize;
        let mut skipped = 0usize;

        for batch in order.chunks(opts.batch_size.max(1)) {
            let beta = T::from_f64_c(log_beta.exp());
            let cfg = ImplicitLayerConfig {
                beta,
                rho: ctx.rho,
                forward: ctx.forward.clone(),
                backward: ctx.backward.clone(),
            };
            let outcomes: Vec<Result<ItemOutcome<T>>> = batch
                .par_iter()
                .map(|&idx| {
                    let item = &train.items[idx];
                    let run = || -> Result<ItemOutcome<T>> {
                        let model = item.model(&ctx.kind, ctx.boundary, ctx.epsilon)?;
                        let (x_hat, z_inf, _) =
                            layer::forward(&model, &params, &cfg, &item.w, None)?;
                        let (loss, grad) = opts.loss.eval(&x_hat, &item.hr)?;
                        let grads = layer::backward(&model, &params, &cfg, &item.w, &z_inf, &grad)?;
                        // Chain rule into the log domain.
                        let d_logbeta = grads.d_beta.to_f64_c() * beta.to_f64_c();
                        Ok(ItemOutcome::Ok {
                            loss,
                            d_theta: grads.d_theta.flatten(),
                            d_logbeta,
                        })
                    };
                    match run() {
                        Ok(o) => Ok(o),
                        // Solver trouble skips the item; anything else is a
                        // real bug and aborts the run.
                        Err(Error::Diverged { .. })
                        | Err(Error::Solver { .. })
                        | Err(Error::NonFinite { .. }) => Ok(ItemOutcome::Skipped),
                        Err(other) => Err(other),
                    }
                })
                .collect();

            let mut grad = vec![0.0f64; n_theta + 1];
            let mut batch_loss = 0.0;
            let mut ok_count = 0usize;
            for outcome in outcomes {
                match outcome? {
                    ItemOutcome::Ok {
                        loss,
                        d_theta,
                        d_logbeta,
                    } => {
                        for (a, b) in grad.iter_mut().zip(d_theta.iter()) {
                            *a += b.to_f64_c();
                        }
                        grad[n_theta] += d_logbeta;
                        batch_loss += loss;
                        ok_count += 1;
                    }
                    ItemOutcome::Skipped => skipped += 1,
                }
            }
            epoch_items += batch.len();
            if ok_count == 0 {
                continue;
            }
            let scale = 1.0 / ok_count as f64;
            for g in &mut grad {
                *g *= scale;
            }
            let mut flat = params.flatten();
            flat.push(T::from_f64_c(log_beta));
            adam.update(&mut flat, &grad, lr);
            log_beta = flat.pop().expect("log beta slot").to_f64_c();
            params.set_from_flat(&flat)?;
            params.normalize_spectral(opts.sn_iters_step);
            epoch_loss += batch_loss;
        }

        if skipped * 2 > epoch_items {
            return Err(Error::Training(format!(
                "epoch {epoch}: {skipped}/{epoch_items} items skipped; contraction likely lost"
            )));
        }

        // Validation pass.
        let beta = T::from_f64_c(log_beta.exp());
        let cfg = ImplicitLayerConfig {
            beta,
            rho: ctx.rho,
            forward: ctx.forward.clone(),
            backward: ctx.backward.clone(),
        };
        let val_scores: Vec<Option<(f64, f64)>> = val
            .items
            .par_iter()
            .map(|item| {
                let model = item.model(&ctx.kind, ctx.boundary, ctx.epsilon).ok()?;
                let (x, _, _) = layer::forward(&model, &params, &cfg, &item.w, None).ok()?;
                let p = psnr(&item.hr, &x, ctx.shave).ok()?;
                let fid = model.fidelity(&x).ok()?.to_f64_c();
                Some((p, fid))
            })
            .collect();
        let ok: Vec<(f64, f64)> = val_scores.iter().flatten().copied().collect();
        let (val_psnr, mean_fid) = if ok.is_empty() {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            (
                ok.iter().map(|(p, _)| p).sum::<f64>() / ok.len() as f64,
                ok.iter().map(|(_, f)| f).sum::<f64>() / ok.len() as f64,
            )
        };
        let mut lip_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (epoch as u64 + 1));
        let lipschitz = params.estimate_lipschitz(20, &mut lip_rng);
        report.epochs.push(EpochStats {
            epoch,
            train_loss: if epoch_items > skipped {
                epoch_loss / (epoch_items - skipped) as f64
            } else {
                f64::NAN
            },
            val_psnr,
            mean_fidelity: mean_fid,
            lipschitz,
            skipped,
            total: epoch_items,
        });
    }

    Ok((params, T::from_f64_c(log_beta.exp()), adam, report))
}

/// Model checkpoint: the denoiser payload plus beta and optimizer state.
pub fn save_model<T: Scalar>(
    path: &Path,
    denoiser: &DenoiserParams<T>,
    beta: T,
    adam: Option<&AdamState>,
    provenance: &str,
) -> Result<()> {
    let tmp = path.with_extension("denoiser.tmp");
    denoiser.save(&tmp, provenance)?;
    let denoiser_bytes =
        std::fs::read(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::remove_file(&tmp).ok();

    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("MCNET-MODEL v1\n");
    header.push_str(&format!("beta {}\n", beta.to_f64_c()));
    header.push_str(&format!("denoiser_bytes {}\n", denoiser_bytes.len()));
    match adam {
        Some(state) => header.push_str(&format!(
            "adam_step {}\nadam_dim {}\n",
            state.step,
            state.m.len()
        )),
        None => header.push_str("adam_step 0\nadam_dim 0\n"),
    }
    header.push_str("data f32-le\n");
    w.write_all(header.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    w.write_all(&denoiser_bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if let Some(state) = adam {
        for &v in state.m.iter().chain(state.v.iter()) {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

/// Load a model checkpoint. Returns the denoiser, beta, and optimizer state
/// when one was stored.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(DenoiserParams<T>, T, Option<AdamState>)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let (header, body) = crate::denoiser::split_checkpoint(&bytes, "MCNET-MODEL v1")?;
    let fields = crate::denoiser::parse_header(&header)?;
    let beta: f64 = crate::denoiser::field(&fields, "beta")?;
    let denoiser_bytes: usize = crate::denoiser::field(&fields, "denoiser_bytes")?;
    let adam_step: usize = crate::denoiser::field(&fields, "adam_step")?;
    let adam_dim: usize = crate::denoiser::field(&fields, "adam_dim")?;
    if body.len() < denoiser_bytes {
        return Err(Error::Checkpoint("model payload truncated".into()));
    }
    let tmp = path.with_extension("denoiser.tmp");
    std::fs::write(&tmp, &body[..denoiser_bytes])
        .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    let denoiser = DenoiserParams::load(&tmp);
    std::fs::remove_file(&tmp).ok();
    let denoiser = denoiser?;

    let adam = if adam_dim > 0 {
        let need = 2 * adam_dim * 4;
        let rest = &body[denoiser_bytes..];
        if rest.len() != need {
            return Err(Error::Checkpoint(format!(
                "optimizer payload has {} bytes, expected {need}",
                rest.len()
            )));
        }
        let mut vals = Vec::with_capacity(2 * adam_dim);
        for chunk in rest.chunks_exact(4) {
            let mut buf = [0u8; 4];
            buf.copy_from_slice(chunk);
            vals.push(f32::from_le_bytes(buf) as f64);
        }
        Some(AdamState {
            m: vals[..adam_dim].to_vec(),
            v: vals[adam_dim..].to_vec(),
            step: adam_step,
        })
    } else {
        None
    };
    Ok((denoiser, T::from_f64_c(beta), adam))
}

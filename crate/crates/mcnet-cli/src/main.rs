//! `mcnet`: measurement-consistent super-resolution from the command line.
//!
//! Subcommands: prepare | pretrain | train | sr | eval | diagnose.
//! Every command reads a `--config` key-value file; `MCNET_<KEY>` environment
//! variables and the `--seed/--scale/--epsilon/--out` flags override it.
//! Exit code 0 means all requested work converged and completed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use mcnet_core::config::RunConfig;
use mcnet_core::dataset::{load_image_dir, modcrop, PatchDataset};
use mcnet_core::denoiser::DenoiserParams;
use mcnet_core::evaluate::{
    evaluate_method, render_csv, render_text, EvalContext, EvalRow, Method,
};
use mcnet_core::io;
use mcnet_core::layer::{self, ImplicitLayerConfig, SolveMethod};
use mcnet_core::measurement::{bicubic_upsample, LinearOperator, MeasurementModel};
use mcnet_core::training::{
    self, grid_search_beta, pretrain_denoiser, select_denoiser, train_mcnet, LossKind,
    TrainContext, TrainOptions,
};
use mcnet_core::{color, ImageF64};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "mcnet")]
#[command(about = "Measurement-consistent single-image super-resolution", long_about = None)]
struct Cli {
    /// Key-value run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config scale (2, 3, or 4).
    #[arg(long, global = true)]
    scale: Option<usize>,

    /// Override the config consistency radius.
    #[arg(long, global = true)]
    epsilon: Option<f64>,

    /// Override the output directory / file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Degrade HR images into measurements and backbone outputs, writing a
    /// manifest that binds the triples.
    Prepare,
    /// Pretrain denoisers at each configured noise level and keep the one
    /// that scores best through the plug-and-play baseline.
    Pretrain,
    /// Grid-search the trade-off weight, then train the implicit layer end
    /// to end; writes the model checkpoint and a per-epoch report.
    Train,
    /// Super-resolve one measurement with a trained model.
    Sr {
        /// Model checkpoint (defaults to `model_ckpt` from the config).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Measurement image (`.ten`, `.png`, or `.pgm`).
        #[arg(long)]
        input_b: PathBuf,
        /// Backbone output in HR shape; bicubic upsampling when omitted.
        #[arg(long)]
        input_w: Option<PathBuf>,
    },
    /// PSNR / SSIM / data-fidelity table over a directory of HR images.
    Eval {
        /// Comma-separated rows: bicubic,pnp,mcnet,external
        #[arg(long, default_value = "bicubic,pnp,mcnet")]
        methods: String,
    },
    /// Fixed-point diagnostics: residual histories, Anderson vs Picard,
    /// Lipschitz and Jacobian-norm estimates.
    Diagnose {
        /// Model checkpoint (defaults to `model_ckpt` from the config).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// HR image to degrade and reconstruct.
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("--config is required"))?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(scale) = cli.scale {
        cfg.scale = scale;
    }
    if let Some(eps) = cli.epsilon {
        cfg.epsilon = eps;
    }
    // For `sr`, --out names the output image instead of a directory.
    if !matches!(cli.command, Commands::Sr { .. }) {
        if let Some(out) = &cli.out {
            cfg.out_dir = Some(out.clone());
        }
    }
    cfg.validate().context("validating config")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Commands::Prepare => cmd_prepare(&cfg),
        Commands::Pretrain => cmd_pretrain(&cfg),
        Commands::Train => cmd_train(&cfg),
        Commands::Sr {
            ckpt,
            input_b,
            input_w,
        } => cmd_sr(
            &cfg,
            ckpt.as_deref(),
            input_b,
            input_w.as_deref(),
            cli.out.as_deref(),
        ),
        Commands::Eval { methods } => cmd_eval(&cfg, methods),
        Commands::Diagnose { ckpt, input } => cmd_diagnose(&cfg, ckpt.as_deref(), input),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| anyhow!("out_dir must be set (config `out_dir` or --out)"))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn operator_for(cfg: &RunConfig, hr_h: usize, hr_w: usize) -> Result<LinearOperator<f64>> {
    Ok(LinearOperator::new(
        cfg.operator_kind(),
        cfg.boundary_mode(),
        hr_h,
        hr_w,
    )?)
}

/// prepare: write LR measurements (lossless + preview), backbone outputs,
/// and the manifest binding the triples. Deterministic given the config.
fn cmd_prepare(cfg: &RunConfig) -> Result<ExitCode> {
    let hr_dir = cfg
        .hr_dir
        .as_ref()
        .ok_or_else(|| anyhow!("prepare needs `hr_dir` in the config"))?;
    let out = out_dir(cfg)?;
    let lr_dir = out.join("lr");
    let w_dir = out.join("backbone");
    std::fs::create_dir_all(&lr_dir)?;
    std::fs::create_dir_all(&w_dir)?;

    let images = load_image_dir::<f64>(hr_dir)?;
    if images.is_empty() {
        bail!("no readable images in {}", hr_dir.display());
    }
    let mut manifest = String::new();
    manifest.push_str("# mcnet prepare manifest\n");
    manifest.push_str(&format!("# operator: {}\n", cfg.operator_spec_string()));
    manifest.push_str(&format!("# seed: {}\n", cfg.seed));
    manifest.push_str("# name\thr\tlr\tbackbone\n");

    let mut failures = 0usize;
    for (name, img) in &images {
        let result = (|| -> Result<()> {
            let luma = modcrop(&color::to_luma(img)?, cfg.scale);
            if luma.height() < 4 * cfg.scale || luma.width() < 4 * cfg.scale {
                bail!("image too small after modcrop");
            }
            let op = operator_for(cfg, luma.height(), luma.width())?;
            let b = op.apply(&luma)?;
            let w = bicubic_upsample(&b, cfg.scale)?;
            let lr_ten = lr_dir.join(format!("{name}.ten"));
            let w_ten = w_dir.join(format!("{name}.ten"));
            io::write_tensor(&lr_ten, &b)?;
            io::write_png(&lr_dir.join(format!("{name}.png")), &b.clamp01())?;
            io::write_tensor(&w_ten, &w)?;
            io::write_png(&w_dir.join(format!("{name}.png")), &w.clamp01())?;
            io::write_png(&out.join(format!("{name}_hr.png")), &luma)?;
            manifest.push_str(&format!(
                "{name}\t{}\t{}\t{}\n",
                out.join(format!("{name}_hr.png")).display(),
                lr_ten.display(),
                w_ten.display()
            ));
            Ok(())
        })();
        if let Err(e) = result {
            eprintln!("warning: skipping `{name}`: {e:#}");
            failures += 1;
        }
    }
    std::fs::write(out.join("manifest.txt"), manifest)?;
    println!(
        "prepared {} of {} images into {}",
        images.len() - failures,
        images.len(),
        out.display()
    );
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn build_train_patches(cfg: &RunConfig) -> Result<PatchDataset<f64>> {
    let hr_dir = cfg
        .hr_dir
        .as_ref()
        .ok_or_else(|| anyhow!("`hr_dir` must point at the training images"))?;
    let images = load_image_dir::<f64>(hr_dir)?;
    if images.is_empty() {
        bail!("no readable images in {}", hr_dir.display());
    }
    let augment = if cfg.augment {
        mcnet_core::dataset::Augment::FlipsRotations
    } else {
        mcnet_core::dataset::Augment::None
    };
    Ok(PatchDataset::from_hr_images_augmented(
        &images,
        cfg.scale,
        cfg.patch_size,
        cfg.patch_stride,
        &cfg.operator_kind(),
        cfg.boundary_mode(),
        augment,
    )?)
}

fn build_val_set(cfg: &RunConfig) -> Result<PatchDataset<f64>> {
    let val_dir = cfg
        .val_dir
        .as_ref()
        .or(cfg.hr_dir.as_ref())
        .ok_or_else(|| anyhow!("`val_dir` or `hr_dir` must be set"))?;
    let images = load_image_dir::<f64>(val_dir)?;
    if images.is_empty() {
        bail!("no readable images in {}", val_dir.display());
    }
    Ok(PatchDataset::whole_images(
        &images,
        cfg.scale,
        &cfg.operator_kind(),
        cfg.boundary_mode(),
    )?)
}

fn train_context(cfg: &RunConfig) -> TrainContext<f64> {
    TrainContext {
        kind: cfg.operator_kind(),
        boundary: cfg.boundary_mode(),
        epsilon: cfg.epsilon,
        rho: cfg.rho,
        forward: cfg.solver_forward(),
        backward: cfg.solver_backward(),
        shave: cfg.shave_pixels(),
    }
}

fn train_options(cfg: &RunConfig) -> Result<TrainOptions> {
    Ok(TrainOptions {
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        lr_drop_epoch: cfg.lr_drop_epoch,
        lr_drop_factor: cfg.lr_drop_factor,
        sn_iters_step: cfg.sn_iters_step,
        seed: cfg.seed,
        loss: LossKind::parse(&cfg.loss)?,
    })
}

/// pretrain: one denoiser per noise level, selection through the
/// plug-and-play baseline on the validation set.
fn cmd_pretrain(cfg: &RunConfig) -> Result<ExitCode> {
    let out = out_dir(cfg)?;
    let patches = build_train_patches(cfg)?;
    let val = build_val_set(cfg)?;
    let opts = train_options(cfg)?;
    println!(
        "pretraining on {} patches ({} px, x{}), validating on {} images",
        patches.len(),
        cfg.patch_size,
        cfg.scale,
        val.len()
    );

    let probe = (cfg.patch_size, cfg.patch_size);
    let pre_opts = TrainOptions {
        lr: cfg.pretrain_lr,
        lr_drop_epoch: cfg.pretrain_epochs,
        ..opts.clone()
    };
    let mut candidates = Vec::new();
    for (i, sigma) in cfg.noise_sigmas().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((i as u64 + 1) << 32));
        let init =
            DenoiserParams::random_chain(cfg.denoiser_depth, cfg.denoiser_width, probe, &mut rng)?;
        let (trained, losses) =
            pretrain_denoiser(init, *sigma, &patches, cfg.pretrain_epochs, &pre_opts)?;
        println!(
            "  sigma {:.4}: loss {:.5} -> {:.5}",
            sigma,
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
        candidates.push(trained);
    }

    let (idx, best, score) = select_denoiser(candidates, &val, &train_context(cfg))?;
    let sigma = cfg.noise_sigmas()[idx];
    println!("selected candidate {idx} (sigma {sigma:.4}) with PnP validation PSNR {score:.4} dB");
    let ckpt = cfg
        .denoiser_ckpt
        .clone()
        .unwrap_or_else(|| out.join("denoiser.ckpt"));
    best.save(
        &ckpt,
        &format!(
            "pretrain sigma={sigma:.6} epochs={} seed={}",
            cfg.pretrain_epochs, cfg.seed
        ),
    )?;
    println!("wrote {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

/// train: beta grid search then end-to-end training of (theta, beta).
fn cmd_train(cfg: &RunConfig) -> Result<ExitCode> {
    let out = out_dir(cfg)?;
    let ckpt_path = cfg
        .denoiser_ckpt
        .clone()
        .unwrap_or_else(|| out.join("denoiser.ckpt"));
    let denoiser: DenoiserParams<f64> = DenoiserParams::load(&ckpt_path)
        .with_context(|| format!("loading denoiser checkpoint {}", ckpt_path.display()))?;
    let patches = build_train_patches(cfg)?;
    let val = build_val_set(cfg)?;
    let opts = train_options(cfg)?;

    let ctx = train_context(cfg);
    let grid: Vec<f64> = cfg.beta_grid.clone();
    let beta0 = grid_search_beta(&denoiser, &grid, &val, &ctx)?;
    println!("beta grid search selected beta0 = {beta0}");

    let (params, beta, adam, report) =
        train_mcnet(denoiser, beta0, &patches, &val, &ctx, cfg.epochs, &opts)?;
    for e in &report.epochs {
        println!(
            "epoch {:>3}: loss {:.6e}  val {:.4} dB  fidelity {:.3e}  lipschitz {:.4}  skipped {}/{}",
            e.epoch, e.train_loss, e.val_psnr, e.mean_fidelity, e.lipschitz, e.skipped, e.total
        );
    }
    let model_path = cfg
        .model_ckpt
        .clone()
        .unwrap_or_else(|| out.join("model.ckpt"));
    training::save_model(
        &model_path,
        &params,
        beta,
        Some(&adam),
        &format!(
            "train epochs={} seed={} beta={beta:.6}",
            cfg.epochs, cfg.seed
        ),
    )?;
    std::fs::write(out.join("train_report.csv"), report.to_csv())?;
    println!(
        "wrote {} and train_report.csv (final beta {beta:.6})",
        model_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_model_or_denoiser(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
) -> Result<(DenoiserParams<f64>, f64)> {
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Some(p) = ckpt {
        candidates.push(p.to_path_buf());
    }
    if let Some(p) = &cfg.model_ckpt {
        candidates.push(p.clone());
    }
    if let Some(p) = &cfg.denoiser_ckpt {
        candidates.push(p.clone());
    }
    if let Some(out) = &cfg.out_dir {
        candidates.push(out.join("model.ckpt"));
        candidates.push(out.join("denoiser.ckpt"));
    }
    let path = candidates.into_iter().find(|p| p.exists()).ok_or_else(|| {
        anyhow!(
            "a model checkpoint is required (--ckpt, `model_ckpt`, or one written under `out_dir`)"
        )
    })?;
    match training::load_model::<f64>(&path) {
        Ok((den, beta, _)) => Ok((den, beta)),
        Err(_) => {
            // Fall back to a bare denoiser checkpoint with a unit beta.
            let den = DenoiserParams::load(&path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            Ok((den, 1.0))
        }
    }
}

/// sr: reconstruct one measurement, write the image, report consistency.
fn cmd_sr(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    input_b: &Path,
    input_w: Option<&Path>,
    out_path: Option<&Path>,
) -> Result<ExitCode> {
    let (denoiser, beta) = load_model_or_denoiser(cfg, ckpt)?;
    let b: ImageF64 = io::read_image_any(input_b)?;
    let b = color::to_luma(&b)?;
    let (hh, hw) = (b.height() * cfg.scale, b.width() * cfg.scale);
    let op = operator_for(cfg, hh, hw)?;
    let model = MeasurementModel::new(op, b.clone(), cfg.epsilon)?;
    let w = match input_w {
        Some(path) => {
            let img: ImageF64 = io::read_image_any(path)?;
            color::to_luma(&img)?
        }
        None => bicubic_upsample(&b, cfg.scale)?,
    };
    let layer_cfg = ImplicitLayerConfig {
        beta,
        rho: cfg.rho,
        forward: cfg.solver_forward(),
        backward: cfg.solver_backward(),
    };

    let out_file = out_path
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("sr_output.png"));
    match layer::forward(&model, &denoiser, &layer_cfg, &w, None) {
        Ok((x_hat, _, report)) => {
            io::write_png(&out_file, &x_hat.clamp01())?;
            let fidelity = model.fidelity(&x_hat)?;
            println!(
                "wrote {} | fidelity {:.6e} | iterations {} | residual {:.3e}",
                out_file.display(),
                fidelity,
                report.iterations,
                report.final_residual()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(err) => {
            // Leave a residual trace behind for post-mortem inspection.
            let diag = out_file.with_extension("residuals.csv");
            if let Ok((_, report)) = layer::run_solver(
                &model,
                &denoiser,
                &layer_cfg,
                &w,
                None,
                SolveMethod::Anderson,
            ) {
                std::fs::write(&diag, report.residuals_csv())?;
                eprintln!("solver diagnostics written to {}", diag.display());
            }
            Err(anyhow!("reconstruction failed: {err}"))
        }
    }
}

/// eval: the PSNR/SSIM/fidelity table over a directory of HR images.
fn cmd_eval(cfg: &RunConfig, methods: &str) -> Result<ExitCode> {
    let out = out_dir(cfg)?;
    let requested: Vec<Method> = methods
        .split(',')
        .map(|m| Method::parse(m.trim()).map_err(|e| anyhow!("{e}")))
        .collect::<Result<_>>()?;
    let mut dataset = build_val_set(cfg)?;

    // External backbone outputs replace the built-in bicubic w when supplied.
    if let Some(dir) = &cfg.external_w_dir {
        for item in &mut dataset.items {
            let mut found = false;
            for ext in ["ten", "png", "pgm"] {
                let path = dir.join(format!("{}.{ext}", item.name));
                if path.exists() {
                    let img: ImageF64 = io::read_image_any(&path)?;
                    let luma = modcrop(&color::to_luma(&img)?, cfg.scale);
                    if luma.shape() != item.hr.shape() {
                        bail!(
                            "external w `{}` has shape {:?}, expected {:?}",
                            path.display(),
                            luma.shape(),
                            item.hr.shape()
                        );
                    }
                    item.w = luma;
                    found = true;
                    break;
                }
            }
            if !found {
                eprintln!("warning: no external w for `{}`", item.name);
            }
        }
    }

    let model_data = load_model_or_denoiser(cfg, None).ok();
    let (denoiser, beta) = match &model_data {
        Some((d, b)) => (Some(d), Some(*b)),
        None => (None, None),
    };
    let ctx = EvalContext {
        kind: cfg.operator_kind(),
        boundary: cfg.boundary_mode(),
        epsilon: cfg.epsilon,
        rho: cfg.rho,
        shave: cfg.shave_pixels(),
        forward: cfg.solver_forward(),
        denoiser,
        beta,
    };

    let mut warnings = Vec::new();
    let mut rows: Vec<EvalRow> = Vec::new();
    for method in &requested {
        if let Some(row) = evaluate_method(method, &dataset, &ctx, &mut warnings)? {
            rows.push(row);
        }
    }
    let text = render_text(&rows);
    print!("{text}");
    for wmsg in &warnings {
        eprintln!("warning: {wmsg}");
    }
    std::fs::write(out.join("eval.txt"), &text)?;
    std::fs::write(out.join("eval.csv"), render_csv(&rows))?;
    println!("wrote {}/eval.txt and eval.csv", out.display());
    Ok(if rows.len() == requested.len() && warnings.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// diagnose: residual histories, Anderson vs Picard, contraction estimates.
fn cmd_diagnose(cfg: &RunConfig, ckpt: Option<&Path>, input: &Path) -> Result<ExitCode> {
    let out = out_dir(cfg)?;
    let (denoiser, beta) = load_model_or_denoiser(cfg, ckpt)?;
    let img: ImageF64 = io::read_image_any(input)?;
    let hr = modcrop(&color::to_luma(&img)?, cfg.scale);
    let op = operator_for(cfg, hr.height(), hr.width())?;
    let b = op.apply(&hr)?;
    let model = MeasurementModel::new(op, b.clone(), cfg.epsilon)?;
    let w = bicubic_upsample(&b, cfg.scale)?;
    let layer_cfg = ImplicitLayerConfig {
        beta,
        rho: cfg.rho,
        forward: cfg.solver_forward(),
        backward: cfg.solver_backward(),
    };

    let (z_and, anderson) = layer::run_solver(
        &model,
        &denoiser,
        &layer_cfg,
        &w,
        None,
        SolveMethod::Anderson,
    )?;
    let (_, picard) =
        layer::run_solver(&model, &denoiser, &layer_cfg, &w, None, SolveMethod::Picard)?;
    std::fs::write(out.join("diagnose_anderson.csv"), anderson.residuals_csv())?;
    std::fs::write(out.join("diagnose_picard.csv"), picard.residuals_csv())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1a6);
    let lipschitz = denoiser.estimate_lipschitz(50, &mut rng);
    println!(
        "anderson: {:?} in {} iterations (residual {:.3e})",
        anderson.status,
        anderson.iterations,
        anderson.final_residual()
    );
    println!(
        "picard:   {:?} in {} iterations (residual {:.3e})",
        picard.status,
        picard.iterations,
        picard.final_residual()
    );
    println!("denoiser lipschitz estimate: {lipschitz:.4}");
    if anderson.converged() {
        let jac =
            layer::jacobian_spectral_norm(&model, &denoiser, &layer_cfg, &w, &z_and, 30, &mut rng)?;
        println!("step jacobian spectral norm at the fixed point: {jac:.4}");
    } else {
        println!("step jacobian estimate skipped: forward solve did not converge");
    }
    println!("residual histories written to {}", out.display());
    Ok(if anderson.converged() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

//! Evaluation tables: per-method mean PSNR / SSIM / data-fidelity over a
//! prepared dataset, with per-image breakdowns, in text and CSV forms that
//! agree to full printed precision.

use rayon::prelude::*;

use crate::dataset::PatchDataset;
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::fixedpoint::SolverConfig;
use crate::layer::{self, ImplicitLayerConfig};
use crate::measurement::OperatorKind;
use crate::metrics::{psnr, ssim};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, PaddingMode};

/// Per-image scores for one method.
#[derive(Debug, Clone)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub fidelity: f64,
}

/// One row of the evaluation table. Means are the arithmetic means of the
/// per-image columns.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub method: String,
    pub scale: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_fidelity: f64,
    pub per_image: Vec<ImageScore>,
}

impl EvalRow {
    fn from_scores(method: &str, scale: usize, per_image: Vec<ImageScore>) -> Self {
        let n = per_image.len().max(1) as f64;
        Self {
            method: method.to_string(),
            scale,
            mean_psnr: per_image.iter().map(|s| s.psnr).sum::<f64>() / n,
            mean_ssim: per_image.iter().map(|s| s.ssim).sum::<f64>() / n,
            mean_fidelity: per_image.iter().map(|s| s.fidelity).sum::<f64>() / n,
            per_image,
        }
    }
}

/// Which reconstruction each table row reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    /// Bicubic upsampling of the measurement.
    Bicubic,
    /// Plug-and-play ADMM with the given denoiser (beta = 0).
    Pnp,
    /// The trained implicit layer.
    Mcnet,
    /// The backbone output evaluated as-is.
    Passthrough,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bicubic" => Ok(Method::Bicubic),
            "pnp" => Ok(Method::Pnp),
            "mcnet" => Ok(Method::Mcnet),
            "external" | "passthrough" => Ok(Method::Passthrough),
            other => Err(Error::Config(format!("unknown eval method `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::Bicubic => "bicubic",
            Method::Pnp => "pnp",
            Method::Mcnet => "mcnet",
            Method::Passthrough => "external-w",
        }
    }
}

/// Everything a table run needs besides the dataset.
pub struct EvalContext<'a, T: Scalar> {
    pub kind: OperatorKind<T>,
    pub boundary: PaddingMode,
    pub epsilon: T,
    pub rho: T,
    pub shave: usize,
    pub forward: SolverConfig,
    pub denoiser: Option<&'a DenoiserParams<T>>,
    pub beta: Option<T>,
}

/// Evaluate one method over the dataset. Items whose solve fails are dropped
/// from the row with a warning entry in `warnings`.
pub fn evaluate_method<T: Scalar>(
    method: &Method,
    dataset: &PatchDataset<T>,
    ctx: &EvalContext<'_, T>,
    warnings: &mut Vec<String>,
) -> Result<Option<EvalRow>> {
    match method {
        Method::Pnp | Method::Mcnet if ctx.denoiser.is_none() => {
            warnings.push(format!(
                "method `{}` skipped: no denoiser checkpoint supplied",
                method.label()
            ));
            return Ok(None);
        }
        Method::Mcnet if ctx.beta.is_none() => {
            warnings.push("method `mcnet` skipped: no trained beta supplied".into());
            return Ok(None);
        }
        _ => {}
    }

    let outputs: Vec<std::result::Result<ImageScore, String>> = dataset
        .items
        .par_iter()
        .map(|item| {
            let model = item
                .model(&ctx.kind, ctx.boundary, ctx.epsilon)
                .map_err(|e| format!("{}: {e}", item.name))?;
            let x: ImageTensor<T> = match method {
                Method::Bicubic => crate::measurement::bicubic_upsample(&item.b, dataset.scale)
                    .map_err(|e| format!("{}: {e}", item.name))?,
                Method::Passthrough => item.w.clone(),
                Method::Pnp => {
                    let den = ctx.denoiser.expect("checked above");
                    layer::pnp_admm_solve(&model, den, ctx.rho, &ctx.forward)
                        .map_err(|e| format!("{}: {e}", item.name))?
                        .0
                }
                Method::Mcnet => {
                    let den = ctx.denoiser.expect("checked above");
                    let cfg = ImplicitLayerConfig {
                        beta: ctx.beta.expect("checked above"),
                        rho: ctx.rho,
                        forward: ctx.forward.clone(),
                        backward: SolverConfig::default(),
                    };
                    layer::forward(&model, den, &cfg, &item.w, None)
                        .map_err(|e| format!("{}: {e}", item.name))?
                        .0
                }
            };
            let fidelity = model
                .fidelity(&x)
                .map_err(|e| format!("{}: {e}", item.name))?
                .to_f64_c();
            let x_clamped = x.clamp01();
            Ok(ImageScore {
                name: item.name.clone(),
                psnr: psnr(&item.hr, &x_clamped, ctx.shave)
                    .map_err(|e| format!("{}: {e}", item.name))?,
                ssim: ssim(&item.hr, &x_clamped, ctx.shave)
                    .map_err(|e| format!("{}: {e}", item.name))?,
                fidelity,
            })
        })
        .collect();

    let mut scores = Vec::new();
    for out in outputs {
        match out {
            Ok(s) => scores.push(s),
            Err(msg) => warnings.push(format!("{}: {msg}", method.label())),
        }
    }
    if scores.is_empty() {
        warnings.push(format!(
            "method `{}` skipped: no image succeeded",
            method.label()
        ));
        return Ok(None);
    }
    Ok(Some(EvalRow::from_scores(
        method.label(),
        dataset.scale,
        scores,
    )))
}

fn fmt_fid(v: f64) -> String {
    format!("{v:.4e}")
}

/// Fixed-precision text table (PSNR and SSIM to four decimals, fidelity in
/// scientific notation).
pub fn render_text(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>5} {:>10} {:>8} {:>12}\n",
        "method", "scale", "psnr", "ssim", "fidelity"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<12} {:>5} {:>10.4} {:>8.4} {:>12}\n",
            row.method,
            format!("x{}", row.scale),
            row.mean_psnr,
            row.mean_ssim,
            fmt_fid(row.mean_fidelity)
        ));
    }
    out
}

/// CSV with the same printed precision as the text table, including the
/// per-image breakdown.
pub fn render_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("method,scale,image,psnr,ssim,fidelity\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},mean,{:.4},{:.4},{}\n",
            row.method,
            row.scale,
            row.mean_psnr,
            row.mean_ssim,
            fmt_fid(row.mean_fidelity)
        ));
        for s in &row.per_image {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{}\n",
                row.method,
                row.scale,
                s.name,
                s.psnr,
                s.ssim,
                fmt_fid(s.fidelity)
            ));
        }
    }
    out
}

//! Image quality metrics on `[0,1]` single-channel images.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// PSNR is capped here instead of returning +inf on identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_pair<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>, shave: usize) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dimension(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let min_dim = a.height().min(a.width());
    if 2 * shave >= min_dim {
        return Err(Error::dimension(format!(
            "shave {shave} too large for {}x{} image",
            a.height(),
            a.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over the border-shaved region, peak 1.0.
pub fn psnr<T: Scalar>(
    reference: &ImageTensor<T>,
    candidate: &ImageTensor<T>,
    shave: usize,
) -> Result<f64> {
    check_pair(reference, candidate, shave)?;
    let r = reference.shave_border(shave);
    let c = candidate.shave_border(shave);
    let diff = r.sub(&c);
    let mse = diff.dot(&diff).to_f64_c() / diff.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// 11x11 Gaussian window with sigma 1.5, normalized to sum 1.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size - 1) as f64 / 2.0;
    let mut w = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            w.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01,
/// K2=0.03, dynamic range 1. Windows are fully contained in the shaved
/// region, following the usual valid-convolution convention.
pub fn ssim<T: Scalar>(
    reference: &ImageTensor<T>,
    candidate: &ImageTensor<T>,
    shave: usize,
) -> Result<f64> {
    check_pair(reference, candidate, shave)?;
    if reference.channels() != 1 {
        return Err(Error::dimension(format!(
            "ssim expects single-channel images, got {} channels",
            reference.channels()
        )));
    }
    let a = reference.shave_border(shave);
    let b = candidate.shave_border(shave);
    let (h, w, _) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dimension(format!(
            "shaved image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }

    let window = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);

    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=(h - SSIM_WINDOW) {
        for ox in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            let mut k = 0usize;
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let g = window[k];
                    k += 1;
                    let va = a.get(oy + wy, ox + wx, 0).to_f64_c();
                    let vb = b.get(oy + wy, ox + wx, 0).to_f64_c();
                    mu_a += g * va;
                    mu_b += g * vb;
                    aa += g * va * va;
                    bb += g * vb * vb;
                    ab += g * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Data-fidelity value `||Ax - b||_2` used by the consistency tables.
pub fn fidelity_norm<T: Scalar>(ax: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    if !ax.same_shape(b) {
        return Err(Error::dimension("fidelity operands differ in shape"));
    }
    Ok(ax.sub(b).norm2().to_f64_c())
}

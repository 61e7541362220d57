//! Procedural grayscale test images: smooth gradients, oriented sinusoid
//! textures, Gaussian blobs, and hard-edged shapes, mixed per seed. Used for
//! desk-scale training and the self-contained test suites, where no external
//! dataset is assumed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::ImageTensor;

/// One deterministic textured image in `[0,1]`.
pub fn texture_image(height: usize, width: usize, seed: u64) -> ImageTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1234_abcd_0001);
    let mut data = vec![0.0f64; height * width];

    // Smooth background gradient.
    let gx = rng.gen_range(-1.0..1.0);
    let gy = rng.gen_range(-1.0..1.0);
    let base = rng.gen_range(0.3..0.7);
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / width as f64 - 0.5;
            let v = y as f64 / height as f64 - 0.5;
            data[y * width + x] = base + 0.3 * (gx * u + gy * v);
        }
    }

    // Oriented sinusoid textures.
    for _ in 0..3 {
        let fx = rng.gen_range(1.0..7.0);
        let fy = rng.gen_range(1.0..7.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.05..0.18);
        for y in 0..height {
            for x in 0..width {
                let u = x as f64 / width as f64;
                let v = y as f64 / height as f64;
                data[y * width + x] +=
                    amp * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            }
        }
    }

    // Gaussian blobs.
    for _ in 0..4 {
        let cx = rng.gen_range(0.1..0.9) * width as f64;
        let cy = rng.gen_range(0.1..0.9) * height as f64;
        let sigma = rng.gen_range(0.04..0.15) * width.max(height) as f64;
        let amp = rng.gen_range(-0.35..0.35);
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                data[y * width + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    // A couple of hard-edged rectangles for sharp structure.
    for _ in 0..2 {
        let x0 = rng.gen_range(0..width.saturating_sub(4));
        let y0 = rng.gen_range(0..height.saturating_sub(4));
        let wdt = rng.gen_range(3..(width / 3).max(4));
        let hgt = rng.gen_range(3..(height / 3).max(4));
        let level = rng.gen_range(-0.3..0.3);
        for y in y0..(y0 + hgt).min(height) {
            for x in x0..(x0 + wdt).min(width) {
                data[y * width + x] += level;
            }
        }
    }

    // Squash into [0.02, 0.98] to stay comfortably inside the pixel range.
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-9);
    for v in &mut data {
        *v = 0.02 + 0.96 * (*v - lo) / span;
    }
    ImageTensor::new(height, width, 1, data).expect("synthetic image is finite")
}

/// A named set of deterministic images, all `height x width`.
pub fn texture_set(
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Vec<(String, ImageTensor<f64>)> {
    (0..count)
        .map(|i| {
            (
                format!("synth{i:02}"),
                texture_image(height, width, seed.wrapping_add(i as u64 * 7919)),
            )
        })
        .collect()
}

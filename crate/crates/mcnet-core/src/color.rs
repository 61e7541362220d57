//! Color transforms. All learning and metrics run on the luma channel.

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::ImageTensor;

/// BT.601 studio-swing luma from an RGB image in `[0,1]`:
/// `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255`, clamped to `[0,1]`.
pub fn rgb_to_y<T: Scalar>(input: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    if input.channels() != 3 {
        return Err(Error::dimension(format!(
            "rgb_to_y expects 3 channels, got {}",
            input.channels()
        )));
    }
    let (h, w, _) = input.shape();
    let kr: T = cast(65.481 / 255.0);
    let kg: T = cast(128.553 / 255.0);
    let kb: T = cast(24.966 / 255.0);
    let offset: T = cast(16.0 / 255.0);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = kr * input.get(y, x, 0)
                + kg * input.get(y, x, 1)
                + kb * input.get(y, x, 2)
                + offset;
            data.push(v.max(T::zero()).min(T::one()));
        }
    }
    ImageTensor::new(h, w, 1, data)
}

/// Collapse any image to single-channel: pass Y-channel work through
/// unchanged, convert RGB via [`rgb_to_y`].
pub fn to_luma<T: Scalar>(input: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    match input.channels() {
        1 => Ok(input.clone()),
        3 => rgb_to_y(input),
        c => Err(Error::dimension(format!(
            "expected 1 or 3 channels, got {c}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_maps_to_235_over_255() {
        let img = ImageTensor::new(1, 1, 3, vec![1.0f64, 1.0, 1.0]).unwrap();
        let y = rgb_to_y(&img).unwrap();
        // (65.481 + 128.553 + 24.966 + 16)/255 = 235/255
        assert!((y.get(0, 0, 0) - 235.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn black_maps_to_16_over_255() {
        let img = ImageTensor::new(1, 1, 3, vec![0.0f64, 0.0, 0.0]).unwrap();
        let y = rgb_to_y(&img).unwrap();
        assert!((y.get(0, 0, 0) - 16.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn gray_is_affine_in_level() {
        for g in [0.1f64, 0.35, 0.5, 0.9] {
            let img = ImageTensor::new(1, 1, 3, vec![g, g, g]).unwrap();
            let y = rgb_to_y(&img).unwrap();
            let expected = (219.0 * g + 16.0) / 255.0;
            assert!((y.get(0, 0, 0) - expected).abs() < 1e-12, "g={g}");
        }
    }

    #[test]
    fn wrong_channel_count_is_error() {
        let img = ImageTensor::<f64>::zeros(2, 2, 1);
        assert!(rgb_to_y(&img).is_err());
    }
}

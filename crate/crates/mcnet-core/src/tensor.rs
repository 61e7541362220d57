//! Dense image tensors and 2-D convolution primitives.
//!
//! `ImageTensor` is a row-major `H x W x C` array in nominal range `[0,1]`.
//! `conv2d` is a strided cross-correlation with same-size padding for odd
//! kernels; `conv2d_adjoint` and `conv2d_kernel_vjp` are its exact transposes
//! with respect to the input and the kernel taps. Everything downstream (the
//! measurement adjoint, denoiser backpropagation, implicit gradients) leans on
//! these adjoints being exact, so they are implemented as literal
//! gather/scatter mirrors of each other.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Boundary handling for convolution padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    Zero,
    Replicate,
    Circular,
}

impl PaddingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PaddingMode::Zero),
            "replicate" => Ok(PaddingMode::Replicate),
            "circular" => Ok(PaddingMode::Circular),
            other => Err(Error::Config(format!("unknown padding mode `{other}`"))),
        }
    }
}

/// Dense `height x width x channels` image, row-major, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T: Scalar> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dimension(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::dimension("image data contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Single-channel tensor from a `rows x cols` nested slice, for tests and
    /// small hand-built instances.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let height = rows.len();
        let width = if height == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(height * width);
        for row in rows {
            assert_eq!(row.len(), width, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert!(self.same_shape(other));
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert!(self.same_shape(other));
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> T {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm2(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let sum: T = self.data.iter().copied().sum();
        sum / T::from_f64_c(self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View a flat vector as an image of this tensor's shape.
    pub fn like_from_vec(&self, data: Vec<T>) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, data)
    }

    /// Extract one channel as a single-channel tensor.
    pub fn channel(&self, c: usize) -> Self {
        assert!(c < self.channels);
        let mut data = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                data.push(self.get(y, x, c));
            }
        }
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Crop `shave` pixels from every border.
    pub fn shave_border(&self, shave: usize) -> Self {
        assert!(
            2 * shave < self.height && 2 * shave < self.width,
            "shave too large"
        );
        let h = self.height - 2 * shave;
        let w = self.width - 2 * shave;
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    data.push(self.get(y + shave, x + shave, c));
                }
            }
        }
        Self {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }

    /// Copy a `ph x pw` patch with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, ph: usize, pw: usize) -> Self {
        assert!(
            y0 + ph <= self.height && x0 + pw <= self.width,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(ph * pw * self.channels);
        for y in 0..ph {
            for x in 0..pw {
                for c in 0..self.channels {
                    data.push(self.get(y0 + y, x0 + x, c));
                }
            }
        }
        Self {
            height: ph,
            width: pw,
            channels: self.channels,
            data,
        }
    }

    pub fn to_f64(&self) -> ImageTensor<f64> {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| v.to_f64_c()).collect(),
        }
    }

    pub fn from_f64(src: &ImageTensor<f64>) -> Self {
        Self {
            height: src.height,
            width: src.width,
            channels: src.channels,
            data: src.data.iter().map(|&v| T::from_f64_c(v)).collect(),
        }
    }
}

/// Convolution kernel: `k_h x k_w x c_in x c_out` taps, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel2D<T: Scalar> {
    k_h: usize,
    k_w: usize,
    c_in: usize,
    c_out: usize,
    stride: usize,
    padding: PaddingMode,
    taps: Vec<T>,
}

impl<T: Scalar> ConvKernel2D<T> {
    pub fn new(
        k_h: usize,
        k_w: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: PaddingMode,
        taps: Vec<T>,
    ) -> Result<Self> {
        if taps.len() != k_h * k_w * c_in * c_out {
            return Err(Error::dimension(format!(
                "kernel taps length {} does not match {k_h}x{k_w}x{c_in}x{c_out}",
                taps.len()
            )));
        }
        if stride == 0 {
            return Err(Error::dimension("stride must be >= 1"));
        }
        Ok(Self {
            k_h,
            k_w,
            c_in,
            c_out,
            stride,
            padding,
            taps,
        })
    }

    pub fn zeros(k_h: usize, k_w: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            k_h,
            k_w,
            c_in,
            c_out,
            stride: 1,
            padding: PaddingMode::Zero,
            taps: vec![T::zero(); k_h * k_w * c_in * c_out],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.k_h, self.k_w, self.c_in, self.c_out)
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> PaddingMode {
        self.padding
    }

    pub fn taps(&self) -> &[T] {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut [T] {
        &mut self.taps
    }

    pub fn into_taps(self) -> Vec<T> {
        self.taps
    }

    #[inline]
    fn tap_base(&self, ky: usize, kx: usize, ci: usize) -> usize {
        ((ky * self.k_w + kx) * self.c_in + ci) * self.c_out
    }

    pub fn scale_in_place(&mut self, s: T) {
        for t in &mut self.taps {
            *t *= s;
        }
    }

    /// Frobenius norm of the taps.
    pub fn tap_norm(&self) -> T {
        self.taps.iter().map(|&t| t * t).sum::<T>().sqrt()
    }
}

#[inline]
fn resolve_index(i: isize, n: usize, mode: PaddingMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match mode {
        PaddingMode::Zero => None,
        PaddingMode::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
        PaddingMode::Circular => Some(i.rem_euclid(n as isize) as usize),
    }
}

fn check_conv_shapes<T: Scalar>(
    input: &ImageTensor<T>,
    kernel: &ConvKernel2D<T>,
) -> Result<(usize, usize)> {
    if input.channels() != kernel.c_in {
        return Err(Error::dimension(format!(
            "input has {} channels, kernel expects {}",
            input.channels(),
            kernel.c_in
        )));
    }
    if kernel.k_h.is_multiple_of(2) || kernel.k_w.is_multiple_of(2) {
        return Err(Error::dimension(
            "same-size convolution requires odd kernel dimensions",
        ));
    }
    let pad_y = (kernel.k_h - 1) / 2;
    let pad_x = (kernel.k_w - 1) / 2;
    if input.height() + 2 * pad_y < kernel.k_h || input.width() + 2 * pad_x < kernel.k_w {
        return Err(Error::dimension("input smaller than kernel support"));
    }
    let out_h = (input.height() + 2 * pad_y - kernel.k_h) / kernel.stride + 1;
    let out_w = (input.width() + 2 * pad_x - kernel.k_w) / kernel.stride + 1;
    Ok((out_h, out_w))
}

/// Strided 2-D cross-correlation with same-size padding for odd kernels.
///
/// `out[oy,ox,co] = sum_{ky,kx,ci} K[ky,kx,ci,co] * pad(x)[oy*s + ky - py, ox*s + kx - px, ci]`
pub fn conv2d<T: Scalar>(
    input: &ImageTensor<T>,
    kernel: &ConvKernel2D<T>,
) -> Result<ImageTensor<T>> {
    let (out_h, out_w) = check_conv_shapes(input, kernel)?;
    let (k_h, k_w, c_in, c_out) = kernel.dims();
    let stride = kernel.stride;
    let pad_y = (k_h - 1) as isize / 2;
    let pad_x = (k_w - 1) as isize / 2;
    let (h, w, _) = input.shape();
    let in_data = input.as_slice();
    let taps = kernel.taps();

    let mut out = vec![T::zero(); out_h * out_w * c_out];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let out_base = (oy * out_w + ox) * c_out;
            for ky in 0..k_h {
                let iy = (oy * stride + ky) as isize - pad_y;
                let Some(iy) = resolve_index(iy, h, kernel.padding) else {
                    continue;
                };
                for kx in 0..k_w {
                    let ix = (ox * stride + kx) as isize - pad_x;
                    let Some(ix) = resolve_index(ix, w, kernel.padding) else {
                        continue;
                    };
                    let in_base = (iy * w + ix) * c_in;
                    for ci in 0..c_in {
                        let v = in_data[in_base + ci];
                        if v == T::zero() {
                            continue;
                        }
                        let tap_base = kernel.tap_base(ky, kx, ci);
                        let out_row = &mut out[out_base..out_base + c_out];
                        let tap_row = &taps[tap_base..tap_base + c_out];
                        for co in 0..c_out {
                            out_row[co] += v * tap_row[co];
                        }
                    }
                }
            }
        }
    }
    ImageTensor::new(out_h, out_w, c_out, out)
}

/// Adjoint of [`conv2d`] with respect to the input: satisfies
/// `<conv2d(x,k), y> = <x, conv2d_adjoint(y,k)>` exactly (same gather indices,
/// scattered instead of gathered).
pub fn conv2d_adjoint<T: Scalar>(
    cotangent: &ImageTensor<T>,
    kernel: &ConvKernel2D<T>,
    input_shape: (usize, usize, usize),
) -> Result<ImageTensor<T>> {
    let (h, w, in_c) = input_shape;
    if in_c != kernel.c_in {
        return Err(Error::dimension(format!(
            "input shape has {} channels, kernel expects {}",
            in_c, kernel.c_in
        )));
    }
    let probe = ImageTensor::<T>::zeros(h, w, in_c);
    let (out_h, out_w) = check_conv_shapes(&probe, kernel)?;
    if cotangent.shape() != (out_h, out_w, kernel.c_out) {
        return Err(Error::dimension(format!(
            "cotangent shape {:?} does not match conv output {:?}",
            cotangent.shape(),
            (out_h, out_w, kernel.c_out)
        )));
    }

    let (k_h, k_w, c_in, c_out) = kernel.dims();
    let stride = kernel.stride;
    let pad_y = (k_h - 1) as isize / 2;
    let pad_x = (k_w - 1) as isize / 2;
    let cot = cotangent.as_slice();
    let taps = kernel.taps();

    let mut grad = vec![T::zero(); h * w * c_in];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let cot_base = (oy * out_w + ox) * c_out;
            let cot_row = &cot[cot_base..cot_base + c_out];
            for ky in 0..k_h {
                let iy = (oy * stride + ky) as isize - pad_y;
                let Some(iy) = resolve_index(iy, h, kernel.padding) else {
                    continue;
                };
                for kx in 0..k_w {
                    let ix = (ox * stride + kx) as isize - pad_x;
                    let Some(ix) = resolve_index(ix, w, kernel.padding) else {
                        continue;
                    };
                    let in_base = (iy * w + ix) * c_in;
                    for ci in 0..c_in {
                        let tap_base = kernel.tap_base(ky, kx, ci);
                        let tap_row = &taps[tap_base..tap_base + c_out];
                        let mut acc = T::zero();
                        for co in 0..c_out {
                            acc += cot_row[co] * tap_row[co];
                        }
                        grad[in_base + ci] += acc;
                    }
                }
            }
        }
    }
    ImageTensor::new(h, w, c_in, grad)
}

/// Gradient of [`conv2d`] with respect to the kernel taps:
/// `dK[ky,kx,ci,co] = sum_{oy,ox} pad(x)[oy*s+ky-py, ox*s+kx-px, ci] * cot[oy,ox,co]`.
pub fn conv2d_kernel_vjp<T: Scalar>(
    input: &ImageTensor<T>,
    cotangent: &ImageTensor<T>,
    kernel: &ConvKernel2D<T>,
) -> Result<ConvKernel2D<T>> {
    let (out_h, out_w) = check_conv_shapes(input, kernel)?;
    if cotangent.shape() != (out_h, out_w, kernel.c_out) {
        return Err(Error::dimension(format!(
            "cotangent shape {:?} does not match conv output {:?}",
            cotangent.shape(),
            (out_h, out_w, kernel.c_out)
        )));
    }
    let (k_h, k_w, c_in, c_out) = kernel.dims();
    let stride = kernel.stride;
    let pad_y = (k_h - 1) as isize / 2;
    let pad_x = (k_w - 1) as isize / 2;
    let (h, w, _) = input.shape();
    let in_data = input.as_slice();
    let cot = cotangent.as_slice();

    let mut dk = vec![T::zero(); k_h * k_w * c_in * c_out];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let cot_base = (oy * out_w + ox) * c_out;
            let cot_row = &cot[cot_base..cot_base + c_out];
            for ky in 0..k_h {
                let iy = (oy * stride + ky) as isize - pad_y;
                let Some(iy) = resolve_index(iy, h, kernel.padding) else {
                    continue;
                };
                for kx in 0..k_w {
                    let ix = (ox * stride + kx) as isize - pad_x;
                    let Some(ix) = resolve_index(ix, w, kernel.padding) else {
                        continue;
                    };
                    let in_base = (iy * w + ix) * c_in;
                    for ci in 0..c_in {
                        let v = in_data[in_base + ci];
                        if v == T::zero() {
                            continue;
                        }
                        let tap_base = kernel.tap_base(ky, kx, ci);
                        let dk_row = &mut dk[tap_base..tap_base + c_out];
                        for co in 0..c_out {
                            dk_row[co] += v * cot_row[co];
                        }
                    }
                }
            }
        }
    }
    ConvKernel2D::new(k_h, k_w, c_in, c_out, stride, kernel.padding, dk)
}

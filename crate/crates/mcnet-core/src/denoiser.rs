//! The learnable denoiser standing in for the proximal step: a bias-free CNN
//! with ReLU activations between layers, exact hand-rolled forward/VJP
//! evaluation, and spectral normalization that keeps every layer's operator
//! norm below a target so the composed network stays contractive.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d, conv2d_adjoint, conv2d_kernel_vjp, ConvKernel2D, ImageTensor, PaddingMode,
};

/// Default per-layer spectral-norm bound: six layers give a product bound of
/// 0.98^6 ~ 0.886 < 1.
pub const DEFAULT_SN_TARGET: f64 = 0.98;

/// Parameters of the denoiser: convolution layers (stride 1, zero padding,
/// no bias anywhere) plus the persistent power-iteration state used by
/// spectral normalization.
#[derive(Debug, Clone)]
pub struct DenoiserParams<T: Scalar> {
    layers: Vec<ConvKernel2D<T>>,
    sn_state: Vec<ImageTensor<T>>,
    sn_target: T,
    probe: (usize, usize),
}

/// Per-layer inputs and ReLU sign masks retained from a forward pass; enables
/// exact VJPs without a framework.
#[derive(Debug, Clone)]
pub struct DenoiserTape<T: Scalar> {
    inputs: Vec<ImageTensor<T>>,
    masks: Vec<Vec<bool>>,
}

impl<T: Scalar> DenoiserTape<T> {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.inputs[0].shape()
    }
}

/// Gradient container mirroring the layer list of [`DenoiserParams`].
#[derive(Debug, Clone)]
pub struct DenoiserGradient<T: Scalar> {
    pub layers: Vec<ConvKernel2D<T>>,
}

impl<T: Scalar> DenoiserGradient<T> {
    pub fn zeros_like(params: &DenoiserParams<T>) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|k| {
                    let (kh, kw, ci, co) = k.dims();
                    ConvKernel2D::zeros(kh, kw, ci, co)
                })
                .collect(),
        }
    }

    pub fn axpy(&mut self, s: T, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            for (x, &y) in a.taps_mut().iter_mut().zip(b.taps().iter()) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for layer in &mut self.layers {
            layer.scale_in_place(s);
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|k| k.taps().iter().copied())
            .collect()
    }

    pub fn norm2(&self) -> T {
        self.layers
            .iter()
            .map(|k| k.taps().iter().map(|&t| t * t).sum::<T>())
            .sum::<T>()
            .sqrt()
    }
}

impl<T: Scalar> DenoiserParams<T> {
    /// Build from explicit layers. Layers must be stride-1, zero-padded, have
    /// odd tap dimensions, carry no bias (the type has nowhere to put one),
    /// and chain single-channel input to single-channel output.
    pub fn from_layers(
        layers: Vec<ConvKernel2D<T>>,
        sn_target: T,
        probe: (usize, usize),
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("denoiser needs at least one layer".into()));
        }
        let mut c_prev = 1usize;
        for (i, k) in layers.iter().enumerate() {
            let (kh, kw, ci, _) = k.dims();
            if k.stride() != 1 || k.padding() != PaddingMode::Zero {
                return Err(Error::Config(format!(
                    "denoiser layer {i} must be stride 1 with zero padding"
                )));
            }
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::Config(format!(
                    "denoiser layer {i} must have odd taps"
                )));
            }
            if ci != c_prev {
                return Err(Error::Config(format!(
                    "denoiser layer {i} expects {ci} input channels, previous layer provides {c_prev}"
                )));
            }
            c_prev = k.c_out();
        }
        if c_prev != 1 {
            return Err(Error::Config(
                "denoiser must end in a single channel".into(),
            ));
        }
        let sn_state = layers
            .iter()
            .map(|k| deterministic_probe(probe.0, probe.1, k.c_in()))
            .collect();
        Ok(Self {
            layers,
            sn_state,
            sn_target,
            probe,
        })
    }

    /// The 6-layer configuration (3x3 taps, width hidden channels,
    /// 1 -> width -> ... -> width -> 1) with He-style init followed by one
    /// spectral-normalization pass, so training starts inside the contractive
    /// region.
    pub fn dncnn6(width: usize, probe: (usize, usize), rng: &mut impl Rng) -> Result<Self> {
        Self::random_chain(6, width, probe, rng)
    }

    /// He-init chain of `depth` 3x3 layers with `width` hidden channels.
    pub fn random_chain(
        depth: usize,
        width: usize,
        probe: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth < 2 {
            return Err(Error::Config("denoiser chain needs depth >= 2".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let ci = if i == 0 { 1 } else { width };
            let co = if i == depth - 1 { 1 } else { width };
            let std = (2.0 / (9.0 * ci as f64)).sqrt();
            let taps: Vec<T> = (0..9 * ci * co)
                .map(|_| {
                    let u: f64 = gaussian(rng);
                    T::from_f64_c(u * std)
                })
                .collect();
            layers.push(ConvKernel2D::new(3, 3, ci, co, 1, PaddingMode::Zero, taps)?);
        }
        let mut params = Self::from_layers(layers, T::from_f64_c(DEFAULT_SN_TARGET), probe)?;
        params.normalize_spectral(30);
        Ok(params)
    }

    /// Pass-through network: center-tap kernels that reproduce positive
    /// inputs exactly (before any spectral normalization). Useful as a
    /// diagnostic starting point and in equivalence tests.
    pub fn identity_like(depth: usize, width: usize, probe: (usize, usize)) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let ci = if i == 0 { 1 } else { width };
            let co = if i == depth - 1 { 1 } else { width };
            let mut k = ConvKernel2D::zeros(3, 3, ci, co);
            {
                let taps = k.taps_mut();
                // Center tap is at (ky=1, kx=1).
                for c_in in 0..ci {
                    for c_out in 0..co {
                        let weight = if i == 0 {
                            1.0
                        } else if i == depth - 1 {
                            1.0 / ci as f64
                        } else if c_in == c_out {
                            1.0
                        } else {
                            0.0
                        };
                        taps[((3 + 1) * ci + c_in) * co + c_out] = T::from_f64_c(weight);
                    }
                }
            }
            layers.push(k);
        }
        Self::from_layers(layers, T::from_f64_c(DEFAULT_SN_TARGET), probe)
    }

    /// Identity-like network with Gaussian tap noise, then spectral
    /// normalization. The result is contractive with input-dependent ReLU
    /// masks, which makes it a well-behaved stand-in for a pretrained
    /// denoiser in small-instance tests and diagnostics.
    pub fn perturbed_identity(
        depth: usize,
        width: usize,
        probe: (usize, usize),
        noise: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut params = Self::identity_like(depth, width, probe)?;
        for layer in &mut params.layers {
            for t in layer.taps_mut() {
                *t += T::from_f64_c(noise * gaussian(rng));
            }
        }
        params.normalize_spectral(30);
        Ok(params)
    }

    pub fn layers(&self) -> &[ConvKernel2D<T>] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn sn_target(&self) -> T {
        self.sn_target
    }

    pub fn probe(&self) -> (usize, usize) {
        self.probe
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|k| k.taps().len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|k| k.taps().iter().copied())
            .collect()
    }

    pub fn set_from_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dimension(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.taps().len();
            layer.taps_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Forward pass `conv_L(relu(...relu(conv_1(x))...))` with tape capture.
    pub fn forward(&self, x: &ImageTensor<T>) -> Result<(ImageTensor<T>, DenoiserTape<T>)> {
        if x.channels() != 1 {
            return Err(Error::dimension(format!(
                "denoiser expects a single channel, got {}",
                x.channels()
            )));
        }
        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut masks = Vec::with_capacity(depth.saturating_sub(1));
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(a.clone());
            let z = conv2d(&a, layer)?;
            if i + 1 < depth {
                let mask: Vec<bool> = z.as_slice().iter().map(|&v| v > T::zero()).collect();
                a = z.map(|v| if v > T::zero() { v } else { T::zero() });
                masks.push(mask);
            } else {
                a = z;
            }
        }
        Ok((a, DenoiserTape { inputs, masks }))
    }

    /// Evaluate without keeping the tape.
    pub fn apply(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        Ok(self.forward(x)?.0)
    }

    fn check_tape(&self, tape: &DenoiserTape<T>, cot: &ImageTensor<T>) -> Result<()> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::dimension("tape depth does not match the network"));
        }
        if cot.shape() != tape.inputs[0].shape() {
            return Err(Error::dimension(format!(
                "cotangent shape {:?} does not match tape input {:?}",
                cot.shape(),
                tape.inputs[0].shape()
            )));
        }
        Ok(())
    }

    /// `[dR/dx]^T cotangent` using the ReLU masks from the tape.
    pub fn vjp_input(
        &self,
        tape: &DenoiserTape<T>,
        cotangent: &ImageTensor<T>,
    ) -> Result<ImageTensor<T>> {
        self.check_tape(tape, cotangent)?;
        let depth = self.layers.len();
        let mut g = cotangent.clone();
        for i in (0..depth).rev() {
            if i + 1 < depth {
                let mask = &tape.masks[i];
                let data = g.as_mut_slice();
                for (v, &keep) in data.iter_mut().zip(mask.iter()) {
                    if !keep {
                        *v = T::zero();
                    }
                }
            }
            g = conv2d_adjoint(&g, &self.layers[i], tape.inputs[i].shape())?;
        }
        Ok(g)
    }

    /// `[dR/dtheta]^T cotangent`, one kernel-shaped gradient per layer.
    pub fn vjp_params(
        &self,
        tape: &DenoiserTape<T>,
        cotangent: &ImageTensor<T>,
    ) -> Result<DenoiserGradient<T>> {
        Ok(self.backward(tape, cotangent, false)?.1)
    }

    /// Shared backward sweep; computes the parameter gradient and (optionally)
    /// the input gradient in one pass.
    pub fn backward(
        &self,
        tape: &DenoiserTape<T>,
        cotangent: &ImageTensor<T>,
        want_input: bool,
    ) -> Result<(Option<ImageTensor<T>>, DenoiserGradient<T>)> {
        self.check_tape(tape, cotangent)?;
        let depth = self.layers.len();
        let mut grads = Vec::with_capacity(depth);
        let mut g = cotangent.clone();
        for i in (0..depth).rev() {
            if i + 1 < depth {
                let mask = &tape.masks[i];
                let data = g.as_mut_slice();
                for (v, &keep) in data.iter_mut().zip(mask.iter()) {
                    if !keep {
                        *v = T::zero();
                    }
                }
            }
            grads.push(conv2d_kernel_vjp(&tape.inputs[i], &g, &self.layers[i])?);
            if i > 0 || want_input {
                g = conv2d_adjoint(&g, &self.layers[i], tape.inputs[i].shape())?;
            }
        }
        grads.reverse();
        let input_grad = want_input.then_some(g);
        Ok((input_grad, DenoiserGradient { layers: grads }))
    }

    /// Directional derivative `[dR/dx] v` with the tape's frozen ReLU masks.
    pub fn jvp_input(&self, tape: &DenoiserTape<T>, v: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        self.check_tape(tape, v)?;
        let depth = self.layers.len();
        let mut d = v.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            d = conv2d(&d, layer)?;
            if i + 1 < depth {
                let mask = &tape.masks[i];
                let data = d.as_mut_slice();
                for (val, &keep) in data.iter_mut().zip(mask.iter()) {
                    if !keep {
                        *val = T::zero();
                    }
                }
            }
        }
        Ok(d)
    }

    /// Spectral-norm estimate of one layer's operator on the probe shape:
    /// a Lanczos iteration on `M^T M` (one conv and one adjoint conv per
    /// step), seeded from and updating the persistent state vector. Krylov
    /// acceleration matters here because convolution operators have strongly
    /// clustered top singular values, where plain power iteration crawls.
    fn layer_spectral_norm(&mut self, layer_idx: usize, iters: usize) -> T {
        let layer = &self.layers[layer_idx];
        let shape = self.sn_state[layer_idx].shape();
        let gram = |v: &ImageTensor<T>| -> ImageTensor<T> {
            let u = conv2d(v, layer).expect("probe shapes are consistent");
            conv2d_adjoint(&u, layer, shape).expect("probe shapes are consistent")
        };

        let seed_norm = self.sn_state[layer_idx].norm2();
        if seed_norm == T::zero() {
            return T::zero();
        }
        let m = iters.max(1);
        let mut basis: Vec<ImageTensor<T>> = Vec::with_capacity(m);
        basis.push(self.sn_state[layer_idx].scale(T::one() / seed_norm));
        let mut alphas: Vec<f64> = Vec::with_capacity(m);
        let mut betas: Vec<f64> = Vec::with_capacity(m);
        for j in 0..m {
            let mut w = gram(&basis[j]);
            let alpha = w.dot(&basis[j]);
            alphas.push(alpha.to_f64_c());
            w.axpy(-alpha, &basis[j]);
            if j > 0 {
                let beta_prev = T::from_f64_c(betas[j - 1]);
                w.axpy(-beta_prev, &basis[j - 1]);
            }
            // Full reorthogonalization: the subspace is small.
            for b in &basis {
                let d = w.dot(b);
                if d != T::zero() {
                    w.axpy(-d, b);
                }
            }
            let beta = w.norm2();
            if beta.to_f64_c() <= 1e-300 || j + 1 == m {
                break;
            }
            betas.push(beta.to_f64_c());
            basis.push(w.scale(T::one() / beta));
        }
        if alphas.iter().all(|&a| a <= 0.0) {
            return T::zero();
        }

        let (lam_max, ritz) = tridiag_max_eig(&alphas, &betas);
        // Refresh the warm-start state with the Ritz vector.
        let mut state = ImageTensor::zeros(shape.0, shape.1, shape.2);
        for (c, b) in ritz.iter().zip(basis.iter()) {
            state.axpy(T::from_f64_c(*c), b);
        }
        let n = state.norm2();
        if n > T::zero() {
            self.sn_state[layer_idx] = state.scale(T::one() / n);
        }
        T::from_f64_c(lam_max.max(0.0).sqrt())
    }

    /// Estimated per-layer spectral norms (updates the power-iteration state,
    /// does not rescale).
    pub fn spectral_norms(&mut self, iters: usize) -> Vec<T> {
        (0..self.layers.len())
            .map(|i| self.layer_spectral_norm(i, iters))
            .collect()
    }

    /// Rescale each layer by `min(1, sn_target / sigma)` so its estimated
    /// operator norm does not exceed the target. Zero layers are left alone.
    ///
    /// The estimate sharpens as the warm-started power iteration converges,
    /// so each layer re-estimates after rescaling until the refined estimate
    /// also sits at or below the target.
    pub fn normalize_spectral(&mut self, power_iters: usize) {
        let slack = self.sn_target * T::from_f64_c(1e-9);
        for i in 0..self.layers.len() {
            for _ in 0..8 {
                let sigma = self.layer_spectral_norm(i, power_iters);
                if sigma <= self.sn_target + slack {
                    break;
                }
                let scale = self.sn_target / sigma;
                self.layers[i].scale_in_place(scale);
            }
        }
    }

    /// Sampled Lipschitz estimate: max of `||R(x1) - R(x2)|| / ||x1 - x2||`
    /// over random pairs on the probe shape.
    pub fn estimate_lipschitz(&self, trials: usize, rng: &mut impl Rng) -> f64 {
        let (h, w) = self.probe;
        let mut best = 0.0f64;
        for _ in 0..trials.max(1) {
            let x1 = random_probe::<T>(h, w, 1, rng);
            let x2 = random_probe::<T>(h, w, 1, rng);
            let dx = x1.sub(&x2).norm2().to_f64_c();
            if dx == 0.0 {
                continue;
            }
            let r1 = self.apply(&x1).expect("probe is single channel");
            let r2 = self.apply(&x2).expect("probe is single channel");
            let dr = r1.sub(&r2).norm2().to_f64_c();
            best = best.max(dr / dx);
        }
        best
    }

    /// Write the checkpoint: a text header (layer shapes, spectral-norm
    /// target, provenance) followed by flat little-endian `f32` taps per
    /// layer in declaration order.
    pub fn save(&self, path: &Path, provenance: &str) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let mut header = String::new();
        header.push_str("MCNET-DENOISER v1\n");
        header.push_str(&format!("sn_target {}\n", self.sn_target.to_f64_c()));
        header.push_str(&format!("probe {} {}\n", self.probe.0, self.probe.1));
        header.push_str(&format!("layers {}\n", self.layers.len()));
        for k in &self.layers {
            let (kh, kw, ci, co) = k.dims();
            header.push_str(&format!("layer {kh} {kw} {ci} {co}\n"));
        }
        header.push_str(&format!("provenance {}\n", provenance.replace('\n', " ")));
        header.push_str("data f32-le\n");
        w.write_all(header.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for k in &self.layers {
            for &t in k.taps() {
                w.write_all(&(t.to_f64_c() as f32).to_le_bytes())
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
        }
        Ok(())
    }

    /// Load a checkpoint written by [`DenoiserParams::save`]. The spectral
    /// power-iteration state is re-estimated (30 iterations) without touching
    /// the loaded weights.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut reader = BufReader::new(file);
        let mut bytes = Vec::new();
        reader
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let (header, body) = split_checkpoint(&bytes, "MCNET-DENOISER v1")?;
        let fields = parse_header(&header)?;
        let sn_target: f64 = field(&fields, "sn_target")?;
        let probe_vals = fields
            .iter()
            .find(|(k, _)| k == "probe")
            .ok_or_else(|| Error::Checkpoint("missing probe".into()))?
            .1
            .clone();
        let probe_parts: Vec<usize> = probe_vals
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad probe".into())))
            .collect::<Result<_>>()?;
        if probe_parts.len() != 2 {
            return Err(Error::Checkpoint("probe needs two values".into()));
        }
        let layer_shapes: Vec<(usize, usize, usize, usize)> = fields
            .iter()
            .filter(|(k, _)| k == "layer")
            .map(|(_, v)| {
                let parts: Vec<usize> = v
                    .split_whitespace()
                    .map(|p| {
                        p.parse()
                            .map_err(|_| Error::Checkpoint("bad layer shape".into()))
                    })
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(Error::Checkpoint("layer line needs 4 values".into()));
                }
                Ok((parts[0], parts[1], parts[2], parts[3]))
            })
            .collect::<Result<_>>()?;
        let declared: usize = field(&fields, "layers")?;
        if declared != layer_shapes.len() {
            return Err(Error::Checkpoint(format!(
                "header declares {declared} layers but lists {}",
                layer_shapes.len()
            )));
        }
        let total: usize = layer_shapes.iter().map(|(a, b, c, d)| a * b * c * d).sum();
        if body.len() != total * 4 {
            return Err(Error::Checkpoint(format!(
                "weight payload has {} bytes, expected {}",
                body.len(),
                total * 4
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(layer_shapes.len());
        for (kh, kw, ci, co) in layer_shapes {
            let n = kh * kw * ci * co;
            let mut taps = Vec::with_capacity(n);
            for _ in 0..n {
                let mut buf = [0u8; 4];
                buf.copy_from_slice(&body[offset..offset + 4]);
                offset += 4;
                taps.push(T::from_f64_c(f32::from_le_bytes(buf) as f64));
            }
            layers.push(ConvKernel2D::new(
                kh,
                kw,
                ci,
                co,
                1,
                PaddingMode::Zero,
                taps,
            )?);
        }
        let mut params = Self::from_layers(
            layers,
            T::from_f64_c(sn_target),
            (probe_parts[0], probe_parts[1]),
        )?;
        params.spectral_norms(30);
        Ok(params)
    }
}

pub(crate) fn split_checkpoint(bytes: &[u8], magic: &str) -> Result<(String, Vec<u8>)> {
    let marker = b"data f32-le\n";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Checkpoint("missing data marker".into()))?;
    let header = String::from_utf8(bytes[..pos].to_vec())
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    if !header.starts_with(magic) {
        return Err(Error::Checkpoint(format!("bad magic, expected `{magic}`")));
    }
    Ok((header, bytes[pos + marker.len()..].to_vec()))
}

pub(crate) fn parse_header(header: &str) -> Result<Vec<(String, String)>> {
    Ok(header
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.splitn(2, ' ');
            let k = it.next().unwrap_or("").to_string();
            let v = it.next().unwrap_or("").to_string();
            (k, v)
        })
        .collect())
}

pub(crate) fn field<V: std::str::FromStr>(fields: &[(String, String)], key: &str) -> Result<V> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| Error::Checkpoint(format!("missing field `{key}`")))?
        .1
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`")))
}

/// Largest eigenvalue (and eigenvector) of a symmetric tridiagonal matrix by
/// Jacobi rotations on the small dense form.
fn tridiag_max_eig(alphas: &[f64], betas: &[f64]) -> (f64, Vec<f64>) {
    let n = alphas.len();
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        a[i * n + i] = alphas[i];
        if i + 1 < n {
            a[i * n + i + 1] = betas[i];
            a[(i + 1) * n + i] = betas[i];
        }
    }
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-15 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = 0.5 * (a[q * n + q] - a[p * n + p]) / apq;
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut best = 0usize;
    for i in 1..n {
        if a[i * n + i] > a[best * n + best] {
            best = i;
        }
    }
    let lam = a[best * n + best];
    let vec: Vec<f64> = (0..n).map(|k| v[k * n + best]).collect();
    (lam, vec)
}

/// Deterministic nonzero probe vector for power-iteration warm starts.
fn deterministic_probe<T: Scalar>(h: usize, w: usize, c: usize) -> ImageTensor<T> {
    let n = h * w * c;
    let mut state = 0x9e3779b97f4a7c15u64;
    let data: Vec<T> = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let v = ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            T::from_f64_c(v)
        })
        .collect();
    ImageTensor::new(h, w, c, data).expect("probe shape is valid")
}

fn random_probe<T: Scalar>(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> ImageTensor<T> {
    let data: Vec<T> = (0..h * w * c)
        .map(|_| T::from_f64_c(rng.gen_range(-1.0..1.0)))
        .collect();
    ImageTensor::new(h, w, c, data).expect("probe shape is valid")
}

/// Box-Muller standard normal from a uniform RNG, drawn in f64 so the stream
/// is identical for every scalar type.
pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

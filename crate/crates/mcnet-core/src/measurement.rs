//! Linear measurement operators for super-resolution and projections onto the
//! feasible set `S = {x : ||b - Ax||_2 <= eps}`.
//!
//! `BoxDownsample` averages `s x s` blocks and has mutually orthogonal rows
//! (`A A^T = I / s^2`), so both projections have closed forms. `BlurDownsample`
//! models bicubic degradation with a separable antialiasing kernel and goes
//! through conjugate-gradient / KKT paths instead.

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::{ImageTensor, PaddingMode};

/// Cubic convolution weight with a = -0.5 (the standard bicubic kernel).
pub fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Antialiased bicubic decimation taps for integer `scale`: the cubic kernel
/// stretched by the scale factor, sampled at integer offsets and normalized to
/// sum 1. Support is 4*scale taps per axis.
pub fn bicubic_downsample_taps<T: Scalar>(scale: usize) -> (Vec<T>, isize) {
    let s = scale as f64;
    let center = (s - 1.0) / 2.0;
    let j_min = (center - 2.0 * s).floor() as isize + 1;
    let j_max = (center + 2.0 * s).ceil() as isize - 1;
    let mut taps = Vec::new();
    for j in j_min..=j_max {
        taps.push(cubic_weight((j as f64 - center) / s) / s);
    }
    let sum: f64 = taps.iter().sum();
    let taps = taps.into_iter().map(|w| T::from_f64_c(w / sum)).collect();
    (taps, j_min)
}

/// Downsampling operator family. All variants map a single-channel
/// `H x W` image to `H/s x W/s`.
#[derive(Debug, Clone)]
pub enum OperatorKind<T: Scalar> {
    /// Mean over non-overlapping `s x s` blocks; `A A^T = I / s^2`.
    BoxDownsample { scale: usize },
    /// Separable blur (same 1-D taps on rows and columns) followed by
    /// decimation by `s`. `anchor` is the input offset of the first tap
    /// relative to `s * output_index`.
    BlurDownsample {
        scale: usize,
        taps: Vec<T>,
        anchor: isize,
    },
}

impl<T: Scalar> OperatorKind<T> {
    /// Bicubic-degradation operator for the given scale.
    pub fn bicubic(scale: usize) -> Self {
        let (taps, anchor) = bicubic_downsample_taps(scale);
        OperatorKind::BlurDownsample {
            scale,
            taps,
            anchor,
        }
    }

    pub fn scale(&self) -> usize {
        match self {
            OperatorKind::BoxDownsample { scale } => *scale,
            OperatorKind::BlurDownsample { scale, .. } => *scale,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::BoxDownsample { .. } => "box",
            OperatorKind::BlurDownsample { .. } => "bicubic",
        }
    }
}

/// A concrete linear operator `A` bound to an HR image shape.
#[derive(Debug, Clone)]
pub struct LinearOperator<T: Scalar> {
    kind: OperatorKind<T>,
    boundary: PaddingMode,
    hr_h: usize,
    hr_w: usize,
}

impl<T: Scalar> LinearOperator<T> {
    pub fn new(
        kind: OperatorKind<T>,
        boundary: PaddingMode,
        hr_h: usize,
        hr_w: usize,
    ) -> Result<Self> {
        let s = kind.scale();
        if s == 0 {
            return Err(Error::Config("operator scale must be >= 1".into()));
        }
        if !hr_h.is_multiple_of(s) || !hr_w.is_multiple_of(s) {
            return Err(Error::dimension(format!(
                "HR shape {hr_h}x{hr_w} not divisible by scale {s}"
            )));
        }
        if matches!(boundary, PaddingMode::Zero) {
            return Err(Error::Config(
                "measurement boundary must be circular or replicate".into(),
            ));
        }
        Ok(Self {
            kind,
            boundary,
            hr_h,
            hr_w,
        })
    }

    pub fn kind(&self) -> &OperatorKind<T> {
        &self.kind
    }

    pub fn boundary(&self) -> PaddingMode {
        self.boundary
    }

    pub fn scale(&self) -> usize {
        self.kind.scale()
    }

    pub fn hr_shape(&self) -> (usize, usize) {
        (self.hr_h, self.hr_w)
    }

    pub fn lr_shape(&self) -> (usize, usize) {
        let s = self.scale();
        (self.hr_h / s, self.hr_w / s)
    }

    /// `1/c` is not meaningful for general operators; returns `c` such that
    /// `A A^T = c I` when the rows are mutually orthogonal.
    pub fn gram_diagonal(&self) -> Option<T> {
        match &self.kind {
            OperatorKind::BoxDownsample { scale } => {
                Some(T::one() / T::from_f64_c((scale * scale) as f64))
            }
            OperatorKind::BlurDownsample { .. } => None,
        }
    }

    fn check_hr<'a>(&self, x: &'a ImageTensor<T>) -> Result<&'a ImageTensor<T>> {
        if x.shape() != (self.hr_h, self.hr_w, 1) {
            return Err(Error::dimension(format!(
                "expected HR shape {}x{}x1, got {:?}",
                self.hr_h,
                self.hr_w,
                x.shape()
            )));
        }
        Ok(x)
    }

    fn check_lr<'a>(&self, r: &'a ImageTensor<T>) -> Result<&'a ImageTensor<T>> {
        let (lh, lw) = self.lr_shape();
        if r.shape() != (lh, lw, 1) {
            return Err(Error::dimension(format!(
                "expected LR shape {lh}x{lw}x1, got {:?}",
                r.shape()
            )));
        }
        Ok(r)
    }

    #[inline]
    fn wrap(&self, i: isize, n: usize) -> usize {
        match self.boundary {
            PaddingMode::Circular => i.rem_euclid(n as isize) as usize,
            _ => i.clamp(0, n as isize - 1) as usize,
        }
    }

    /// Apply `A`.
    pub fn apply(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        self.check_hr(x)?;
        let (lh, lw) = self.lr_shape();
        match &self.kind {
            OperatorKind::BoxDownsample { scale } => {
                let s = *scale;
                let inv = T::one() / T::from_f64_c((s * s) as f64);
                let mut out = Vec::with_capacity(lh * lw);
                for oy in 0..lh {
                    for ox in 0..lw {
                        let mut acc = T::zero();
                        for dy in 0..s {
                            for dx in 0..s {
                                acc += x.get(oy * s + dy, ox * s + dx, 0);
                            }
                        }
                        out.push(acc * inv);
                    }
                }
                ImageTensor::new(lh, lw, 1, out)
            }
            OperatorKind::BlurDownsample {
                scale,
                taps,
                anchor,
            } => {
                let s = *scale;
                // Separable: blur+decimate rows, then columns.
                let mut mid = vec![T::zero(); self.hr_h * lw];
                for y in 0..self.hr_h {
                    for ox in 0..lw {
                        let mut acc = T::zero();
                        for (t, &wt) in taps.iter().enumerate() {
                            let ix = (ox * s) as isize + anchor + t as isize;
                            acc += wt * x.get(y, self.wrap(ix, self.hr_w), 0);
                        }
                        mid[y * lw + ox] = acc;
                    }
                }
                let mut out = Vec::with_capacity(lh * lw);
                for oy in 0..lh {
                    for ox in 0..lw {
                        let mut acc = T::zero();
                        for (t, &wt) in taps.iter().enumerate() {
                            let iy = (oy * s) as isize + anchor + t as isize;
                            acc += wt * mid[self.wrap(iy, self.hr_h) * lw + ox];
                        }
                        out.push(acc);
                    }
                }
                ImageTensor::new(lh, lw, 1, out)
            }
        }
    }

    /// Apply `A^T` (exact adjoint of [`LinearOperator::apply`]).
    pub fn adjoint(&self, r: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        self.check_lr(r)?;
        let (lh, lw) = self.lr_shape();
        match &self.kind {
            OperatorKind::BoxDownsample { scale } => {
                let s = *scale;
                let inv = T::one() / T::from_f64_c((s * s) as f64);
                let mut out = vec![T::zero(); self.hr_h * self.hr_w];
                for oy in 0..lh {
                    for ox in 0..lw {
                        let v = r.get(oy, ox, 0) * inv;
                        for dy in 0..s {
                            for dx in 0..s {
                                out[(oy * s + dy) * self.hr_w + (ox * s + dx)] = v;
                            }
                        }
                    }
                }
                ImageTensor::new(self.hr_h, self.hr_w, 1, out)
            }
            OperatorKind::BlurDownsample {
                scale,
                taps,
                anchor,
            } => {
                let s = *scale;
                // Scatter through the column pass, then the row pass.
                let mut mid = vec![T::zero(); self.hr_h * lw];
                for oy in 0..lh {
                    for ox in 0..lw {
                        let v = r.get(oy, ox, 0);
                        for (t, &wt) in taps.iter().enumerate() {
                            let iy = (oy * s) as isize + anchor + t as isize;
                            mid[self.wrap(iy, self.hr_h) * lw + ox] += wt * v;
                        }
                    }
                }
                let mut out = vec![T::zero(); self.hr_h * self.hr_w];
                for y in 0..self.hr_h {
                    for ox in 0..lw {
                        let v = mid[y * lw + ox];
                        if v == T::zero() {
                            continue;
                        }
                        for (t, &wt) in taps.iter().enumerate() {
                            let ix = (ox * s) as isize + anchor + t as isize;
                            out[y * self.hr_w + self.wrap(ix, self.hr_w)] += wt * v;
                        }
                    }
                }
                ImageTensor::new(self.hr_h, self.hr_w, 1, out)
            }
        }
    }
}

/// Conjugate gradients for SPD operators given as closures.
/// Returns the solution or the final relative residual on budget exhaustion.
fn conjugate_gradient<T: Scalar>(
    apply: impl Fn(&[T]) -> Vec<T>,
    rhs: &[T],
    tol: f64,
    max_iters: usize,
) -> std::result::Result<Vec<T>, f64> {
    let n = rhs.len();
    let mut x = vec![T::zero(); n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let rhs_norm = rhs.iter().map(|&v| v * v).sum::<T>().sqrt().to_f64_c();
    if rhs_norm == 0.0 {
        return Ok(x);
    }
    let mut rs_old: T = r.iter().map(|&v| v * v).sum();
    for _ in 0..max_iters {
        if rs_old.sqrt().to_f64_c() <= tol * rhs_norm {
            return Ok(x);
        }
        let ap = apply(&p);
        let pap: T = p.iter().zip(ap.iter()).map(|(&a, &b)| a * b).sum();
        if pap.to_f64_c().abs() < 1e-300 {
            break;
        }
        let alpha = rs_old / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: T = r.iter().map(|&v| v * v).sum();
        let beta = rs_new / rs_old;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs_old = rs_new;
    }
    let final_res = rs_old.sqrt().to_f64_c() / rhs_norm;
    if final_res <= tol {
        Ok(x)
    } else {
        Err(final_res)
    }
}

const CG_TOL: f64 = 1e-10;
const CG_MAX_ITERS: usize = 500;
const BALL_ROOT_TOL: f64 = 1e-10;

/// Measurement model: operator, observed measurement, consistency radius.
#[derive(Debug, Clone)]
pub struct MeasurementModel<T: Scalar> {
    op: LinearOperator<T>,
    b: ImageTensor<T>,
    epsilon: T,
}

impl<T: Scalar> MeasurementModel<T> {
    pub fn new(op: LinearOperator<T>, b: ImageTensor<T>, epsilon: T) -> Result<Self> {
        let (lh, lw) = op.lr_shape();
        if b.shape() != (lh, lw, 1) {
            return Err(Error::dimension(format!(
                "measurement shape {:?} does not match operator LR shape {lh}x{lw}x1",
                b.shape()
            )));
        }
        if epsilon < T::zero() {
            return Err(Error::Config("epsilon must be nonnegative".into()));
        }
        Ok(Self { op, b, epsilon })
    }

    pub fn operator(&self) -> &LinearOperator<T> {
        &self.op
    }

    pub fn b(&self) -> &ImageTensor<T> {
        &self.b
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn hr_shape(&self) -> (usize, usize) {
        self.op.hr_shape()
    }

    pub fn apply(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        self.op.apply(x)
    }

    pub fn adjoint(&self, r: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        self.op.adjoint(r)
    }

    /// `||A x - b||_2`, the data-fidelity value reported in tables.
    pub fn fidelity(&self, x: &ImageTensor<T>) -> Result<T> {
        Ok(self.apply(x)?.sub(&self.b).norm2())
    }

    /// Projection onto `S`, dispatching on `epsilon`.
    pub fn project(&self, q: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        if self.epsilon == T::zero() {
            self.project_affine(q)
        } else {
            self.project_ball(q)
        }
    }

    /// Exact projection onto `{x : Ax = b}`:
    /// `q + A^T (A A^T)^{-1} (b - A q)`.
    pub fn project_affine(&self, q: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        let residual = self.b.sub(&self.apply(q)?);
        let correction = self.solve_gram(&residual)?;
        let mut out = q.clone();
        out.axpy(T::one(), &self.adjoint(&correction)?);
        Ok(out)
    }

    /// Solve `A A^T y = r` in LR space (closed form for orthogonal rows,
    /// conjugate gradients otherwise).
    fn solve_gram(&self, r: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        if let Some(c) = self.op.gram_diagonal() {
            return Ok(r.scale(T::one() / c));
        }
        let op = &self.op;
        let apply_gram = |v: &[T]| -> Vec<T> {
            let (lh, lw) = op.lr_shape();
            let img = ImageTensor::new(lh, lw, 1, v.to_vec()).expect("shape");
            op.apply(&op.adjoint(&img).expect("adjoint"))
                .expect("apply")
                .into_vec()
        };
        match conjugate_gradient(apply_gram, r.as_slice(), CG_TOL, CG_MAX_ITERS) {
            Ok(sol) => r.like_from_vec(sol),
            Err(res) => Err(Error::Solver {
                context: "conjugate gradients on A A^T".into(),
                residual: res,
            }),
        }
    }

    /// Projection onto the ball `{x : ||Ax - b|| <= eps}` for `eps > 0`.
    pub fn project_ball(&self, q: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        if self.epsilon <= T::zero() {
            return Err(Error::Precondition(
                "project_ball requires epsilon > 0".into(),
            ));
        }
        let v = self.b.sub(&self.apply(q)?); // b - Aq
        let r = v.norm2();
        if r <= self.epsilon {
            return Ok(q.clone());
        }
        if let Some(c) = self.op.gram_diagonal() {
            // q + (1/c)(1 - eps/r) A^T (b - Aq)
            let coef = (T::one() / c) * (T::one() - self.epsilon / r);
            let mut out = q.clone();
            out.axpy(coef, &self.adjoint(&v)?);
            return Ok(out);
        }
        let (mu, x) = self.solve_ball_kkt(q)?;
        let _ = mu;
        Ok(x)
    }

    /// Root-find `mu >= 0` with `||A x(mu) - b|| = eps` where
    /// `(I + mu A^T A) x = q + mu A^T b`. Bracket by doubling, then a
    /// safeguarded Newton iteration on the residual; the returned `(mu, x)`
    /// pair is consistent (x solved at exactly that mu), which the projection
    /// VJP relies on.
    fn solve_ball_kkt(&self, q: &ImageTensor<T>) -> Result<(T, ImageTensor<T>)> {
        let op = &self.op;
        let (hh, hw) = op.hr_shape();
        let solve_m = |mu: T, rhs: &ImageTensor<T>| -> Result<ImageTensor<T>> {
            let apply_m = |v: &[T]| -> Vec<T> {
                let img = ImageTensor::new(hh, hw, 1, v.to_vec()).expect("shape");
                let mut out = img.clone();
                out.axpy(
                    mu,
                    &op.adjoint(&op.apply(&img).expect("apply"))
                        .expect("adjoint"),
                );
                out.into_vec()
            };
            match conjugate_gradient(apply_m, rhs.as_slice(), CG_TOL, CG_MAX_ITERS) {
                Ok(sol) => rhs.like_from_vec(sol),
                Err(res) => Err(Error::Solver {
                    context: "conjugate gradients on I + mu A^T A".into(),
                    residual: res,
                }),
            }
        };
        let atb = self.adjoint(&self.b)?;
        let solve_for = |mu: T| -> Result<ImageTensor<T>> {
            let mut rhs = q.clone();
            rhs.axpy(mu, &atb);
            solve_m(mu, &rhs)
        };

        // Bracket: residual(0) > eps (checked by caller), double until below.
        let mut hi = T::one();
        let mut doubles = 0;
        while self.fidelity(&solve_for(hi)?)? > self.epsilon {
            hi *= cast(2.0);
            doubles += 1;
            if doubles > 200 {
                return Err(Error::Solver {
                    context: "ball projection bracket search".into(),
                    residual: self.fidelity(&solve_for(hi)?)?.to_f64_c(),
                });
            }
        }
        let mut lo = T::zero();
        let mut mu = hi;
        let tol = T::from_f64_c(BALL_ROOT_TOL) * (T::one() + self.epsilon);
        for _ in 0..100 {
            let x = solve_for(mu)?;
            let y = self.apply(&x)?.sub(&self.b);
            let r = y.norm2();
            let g = r - self.epsilon;
            if g.abs() <= tol {
                return Ok((mu, x));
            }
            if g > T::zero() {
                lo = mu;
            } else {
                hi = mu;
            }
            // Newton step on g(mu) = ||A x(mu) - b|| - eps:
            // g'(mu) = -(A^T y)^T M^{-1} (A^T y) / r.
            let aty = self.adjoint(&y)?;
            let h_vec = solve_m(mu, &aty)?;
            let slope = -(aty.dot(&h_vec)) / r;
            let mut next = mu - g / slope;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = (lo + hi) * cast(0.5);
            }
            mu = next;
        }
        let x = solve_for(mu)?;
        let final_gap = (self.fidelity(&x)? - self.epsilon).abs().to_f64_c();
        if final_gap <= 1e-6 {
            Ok((mu, x))
        } else {
            Err(Error::Solver {
                context: "ball projection root finding".into(),
                residual: final_gap,
            })
        }
    }

    /// Jacobian-transpose product of the projection at `q`.
    ///
    /// For `eps = 0` the projection is affine with self-adjoint linear part
    /// `P = I - A^T (A A^T)^{-1} A`. For `eps > 0` the analytic Jacobian of
    /// the shrinkage (or KKT) solution is used; it is symmetric, and the
    /// inactive region (including the boundary `r = eps`) is the identity.
    pub fn projection_vjp(
        &self,
        q: &ImageTensor<T>,
        cotangent: &ImageTensor<T>,
    ) -> Result<ImageTensor<T>> {
        if !q.same_shape(cotangent) {
            return Err(Error::dimension("projection_vjp cotangent shape mismatch"));
        }
        if self.epsilon == T::zero() {
            let a_cot = self.apply(cotangent)?;
            let y = self.solve_gram(&a_cot)?;
            let mut out = cotangent.clone();
            out.axpy(-T::one(), &self.adjoint(&y)?);
            return Ok(out);
        }
        let v = self.b.sub(&self.apply(q)?);
        let r = v.norm2();
        if r <= self.epsilon {
            return Ok(cotangent.clone());
        }
        if let Some(c) = self.op.gram_diagonal() {
            // J u = u - (1/c)(1 - eps/r) A^T A u - (eps/(c r^3)) <v, A u> A^T v
            let inv_c = T::one() / c;
            let au = self.apply(cotangent)?;
            let mut out = cotangent.clone();
            out.axpy(
                -(inv_c * (T::one() - self.epsilon / r)),
                &self.adjoint(&au)?,
            );
            let vau = v.dot(&au);
            let coef = inv_c * self.epsilon / (r * r * r) * vau;
            out.axpy(-coef, &self.adjoint(&v)?);
            return Ok(out);
        }
        // General operator: differentiate the KKT solution x(mu(q), q).
        // J u = M^{-1} u - h (h^T u) / (y^T A h), with M = I + mu A^T A,
        // h = M^{-1} A^T y, y = A x* - b.
        let (mu, x_star) = self.solve_ball_kkt(q)?;
        let y = self.apply(&x_star)?.sub(&self.b);
        let op = &self.op;
        let (hh, hw) = op.hr_shape();
        let apply_m = |v: &[T]| -> Vec<T> {
            let img = ImageTensor::new(hh, hw, 1, v.to_vec()).expect("shape");
            let mut out = img.clone();
            out.axpy(
                mu,
                &op.adjoint(&op.apply(&img).expect("apply"))
                    .expect("adjoint"),
            );
            out.into_vec()
        };
        let solve_m = |rhs: &ImageTensor<T>| -> Result<ImageTensor<T>> {
            match conjugate_gradient(apply_m, rhs.as_slice(), CG_TOL, CG_MAX_ITERS) {
                Ok(sol) => rhs.like_from_vec(sol),
                Err(res) => Err(Error::Solver {
                    context: "conjugate gradients in projection VJP".into(),
                    residual: res,
                }),
            }
        };
        let aty = self.adjoint(&y)?;
        let h = solve_m(&aty)?;
        let denom = aty.dot(&h); // y^T A M^{-1} A^T y
        let m_inv_u = solve_m(cotangent)?;
        let mut out = m_inv_u;
        out.axpy(-(h.dot(cotangent) / denom), &h);
        Ok(out)
    }
}

/// Bicubic interpolation upsampling by an integer factor (the built-in
/// backbone and the baseline of the evaluation tables). Border handling is
/// replicate; interpolation weights are renormalized per phase.
pub fn bicubic_upsample<T: Scalar>(lr: &ImageTensor<T>, scale: usize) -> Result<ImageTensor<T>> {
    if lr.channels() != 1 {
        return Err(Error::dimension(
            "bicubic_upsample expects a single channel",
        ));
    }
    let (lh, lw, _) = lr.shape();
    let (hh, hw) = (lh * scale, lw * scale);

    // Per output phase: four taps and weights along one axis.
    let phase_taps = |out_i: usize, n_in: usize| -> ([usize; 4], [f64; 4]) {
        let u = (out_i as f64 + 0.5) / scale as f64 - 0.5;
        let base = u.floor() as isize;
        let mut idx = [0usize; 4];
        let mut wts = [0f64; 4];
        let mut sum = 0.0;
        for k in 0..4 {
            let j = base - 1 + k as isize;
            idx[k] = j.clamp(0, n_in as isize - 1) as usize;
            wts[k] = cubic_weight(u - j as f64);
            sum += wts[k];
        }
        for w in &mut wts {
            *w /= sum;
        }
        (idx, wts)
    };

    // Rows pass.
    let mut mid = vec![T::zero(); lh * hw];
    for x in 0..hw {
        let (idx, wts) = phase_taps(x, lw);
        for y in 0..lh {
            let mut acc = T::zero();
            for k in 0..4 {
                acc += T::from_f64_c(wts[k]) * lr.get(y, idx[k], 0);
            }
            mid[y * hw + x] = acc;
        }
    }
    // Columns pass.
    let mut out = vec![T::zero(); hh * hw];
    for y in 0..hh {
        let (idx, wts) = phase_taps(y, lh);
        for x in 0..hw {
            let mut acc = T::zero();
            for k in 0..4 {
                acc += T::from_f64_c(wts[k]) * mid[idx[k] * hw + x];
            }
            out[y * hw + x] = acc;
        }
    }
    ImageTensor::new(hh, hw, 1, out)
}

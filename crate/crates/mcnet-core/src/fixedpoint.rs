//! Generic fixed-point solving on flat vectors: plain Picard iteration,
//! type-II Anderson acceleration, and the Douglas-Rachford step used as an
//! equivalence oracle for the ADMM iteration.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

type MapFn<'a, T> = Box<dyn Fn(&[T]) -> Result<Vec<T>> + 'a>;

/// A fixed-point problem `z = F(z)` on flat vectors of dimension `dim`.
pub struct FixedPointProblem<'a, T: Scalar> {
    map: MapFn<'a, T>,
    dim: usize,
}

impl<'a, T: Scalar> FixedPointProblem<'a, T> {
    pub fn new(dim: usize, map: impl Fn(&[T]) -> Result<Vec<T>> + 'a) -> Self {
        Self {
            map: Box::new(map),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, z: &[T], iteration: usize) -> Result<Vec<T>> {
        let fz = (self.map)(z)?;
        if fz.len() != self.dim {
            return Err(Error::dimension(format!(
                "map changed dimension: {} -> {}",
                self.dim,
                fz.len()
            )));
        }
        if fz.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration,
                context: "fixed-point map produced a non-finite value".into(),
            });
        }
        Ok(fz)
    }
}

/// Solver knobs shared by Picard and Anderson iterations.
///
/// `anderson_ridge` regularizes the Anderson least-squares relative to the
/// Gram trace, so acceleration keeps working as residuals shrink. Divergence
/// is flagged when the absolute residual blows up 1e3x over its running
/// minimum, when the iterate norm escapes 1e3x past the initial iterate
/// (inflating `||z||` would otherwise shrink the relative residual below
/// tolerance without an actual fixed point), or when the absolute residual
/// fails to improve over a `stagnation_window` while the relative residual
/// is still above `tol` (dual-variable drift moves the iterate at constant
/// step length).
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub anderson_memory: usize,
    pub anderson_ridge: f64,
    pub anderson_mixing: f64,
    pub stagnation_window: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            anderson_memory: 5,
            anderson_ridge: 1e-4,
            anderson_mixing: 1.0,
            stagnation_window: 50,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tol <= 0.0 {
            return Err(Error::Config("solver tol must be > 0".into()));
        }
        if self.anderson_memory < 1 {
            return Err(Error::Config("anderson_memory must be >= 1".into()));
        }
        if !(0.0 < self.anderson_mixing && self.anderson_mixing <= 1.0) {
            return Err(Error::Config("anderson_mixing must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn with_budget(mut self, max_iters: usize, tol: f64) -> Self {
        self.max_iters = max_iters;
        self.tol = tol;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIters,
    Diverged,
}

/// Outcome of a fixed-point solve. `residual_history` stores the relative
/// residual `||F(z) - z|| / (||z|| + 1)` per map evaluation.
#[derive(Debug, Clone)]
pub struct SolveReport<T: Scalar> {
    pub solution: Vec<T>,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub status: SolveStatus,
}

impl<T: Scalar> SolveReport<T> {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// CSV dump of the residual history (one line per iteration).
    pub fn residuals_csv(&self) -> String {
        let mut out = String::from("iteration,relative_residual\n");
        for (i, r) in self.residual_history.iter().enumerate() {
            out.push_str(&format!("{i},{r:e}\n"));
        }
        out
    }
}

const BLOWUP_FACTOR: f64 = 1e3;
const STAGNATION_IMPROVEMENT: f64 = 0.999;
const ESCAPE_FACTOR: f64 = 1e3;

/// Tracks absolute residuals for blow-up and stagnation detection.
struct DivergenceMonitor {
    min_abs: f64,
    window: usize,
    window_min: f64,
    min_before_window: f64,
    count_in_window: usize,
    /// Stagnation only counts while the relative residual is clearly above
    /// tolerance; near the numerical floor a plateau is not divergence.
    stagnation_floor: f64,
}

impl DivergenceMonitor {
    fn new(window: usize, tol: f64) -> Self {
        Self {
            min_abs: f64::INFINITY,
            window,
            window_min: f64::INFINITY,
            min_before_window: f64::INFINITY,
            count_in_window: 0,
            stagnation_floor: 100.0 * tol,
        }
    }

    /// Returns true when the iteration should be declared divergent.
    fn observe(&mut self, abs_residual: f64, rel_residual: f64) -> bool {
        if abs_residual > BLOWUP_FACTOR * self.min_abs {
            return true;
        }
        self.min_abs = self.min_abs.min(abs_residual);
        if self.window == 0 || rel_residual <= self.stagnation_floor {
            return false;
        }
        self.window_min = self.window_min.min(abs_residual);
        self.count_in_window += 1;
        if self.count_in_window >= self.window {
            if self.min_before_window.is_finite()
                && self.window_min >= STAGNATION_IMPROVEMENT * self.min_before_window
            {
                return true;
            }
            self.min_before_window = self.min_before_window.min(self.window_min);
            self.window_min = f64::INFINITY;
            self.count_in_window = 0;
        }
        false
    }
}

fn norms<T: Scalar>(z: &[T], fz: &[T]) -> (f64, f64) {
    let mut res2 = 0.0;
    let mut z2 = 0.0;
    for (&a, &b) in z.iter().zip(fz.iter()) {
        let d = (b - a).to_f64_c();
        res2 += d * d;
        let v = a.to_f64_c();
        z2 += v * v;
    }
    (res2.sqrt(), z2.sqrt())
}

/// Plain Picard iteration `z <- F(z)`.
pub fn solve_picard<T: Scalar>(
    problem: &FixedPointProblem<'_, T>,
    z0: &[T],
    cfg: &SolverConfig,
) -> Result<SolveReport<T>> {
    cfg.validate()?;
    if z0.len() != problem.dim() {
        return Err(Error::dimension(format!(
            "initial iterate has dimension {}, problem expects {}",
            z0.len(),
            problem.dim()
        )));
    }
    let mut z = z0.to_vec();
    let escape_norm =
        ESCAPE_FACTOR * (z0.iter().map(|v| v.to_f64_c().powi(2)).sum::<f64>().sqrt() + 1.0);
    let mut history = Vec::new();
    let mut monitor = DivergenceMonitor::new(cfg.stagnation_window, cfg.tol);
    for k in 0..cfg.max_iters {
        let fz = problem.eval(&z, k)?;
        let (abs, znorm) = norms(&z, &fz);
        let rel = abs / (znorm + 1.0);
        history.push(rel);
        if znorm > escape_norm {
            return Ok(SolveReport {
                solution: z,
                iterations: k + 1,
                residual_history: history,
                status: SolveStatus::Diverged,
            });
        }
        if rel <= cfg.tol {
            return Ok(SolveReport {
                solution: z,
                iterations: k + 1,
                residual_history: history,
                status: SolveStatus::Converged,
            });
        }
        if monitor.observe(abs, rel) {
            return Ok(SolveReport {
                solution: z,
                iterations: k + 1,
                residual_history: history,
                status: SolveStatus::Diverged,
            });
        }
        z = fz;
    }
    Ok(SolveReport {
        solution: z,
        iterations: cfg.max_iters,
        residual_history: history,
        status: SolveStatus::MaxIters,
    })
}

/// Solve the small symmetric system `(G + reg I) gamma = rhs` in place.
fn solve_normal_equations(gram: &mut [f64], rhs: &mut [f64], k: usize, ridge: f64) -> Vec<f64> {
    let trace: f64 = (0..k).map(|i| gram[i * k + i]).sum();
    let reg = ridge * (trace / k as f64).max(f64::MIN_POSITIVE);
    for i in 0..k {
        gram[i * k + i] += reg;
    }
    // Gaussian elimination with partial pivoting.
    let mut perm: Vec<usize> = (0..k).collect();
    for col in 0..k {
        let mut pivot = col;
        for row in col + 1..k {
            if gram[perm[row] * k + col].abs() > gram[perm[pivot] * k + col].abs() {
                pivot = row;
            }
        }
        perm.swap(col, pivot);
        let p = gram[perm[col] * k + col];
        if p.abs() < 1e-300 {
            continue;
        }
        for row in col + 1..k {
            let f = gram[perm[row] * k + col] / p;
            if f == 0.0 {
                continue;
            }
            for c in col..k {
                gram[perm[row] * k + c] -= f * gram[perm[col] * k + c];
            }
            rhs[perm[row]] -= f * rhs[perm[col]];
        }
    }
    let mut gamma = vec![0.0; k];
    for col in (0..k).rev() {
        let mut acc = rhs[perm[col]];
        for c in col + 1..k {
            acc -= gram[perm[col] * k + c] * gamma[c];
        }
        let p = gram[perm[col] * k + col];
        gamma[col] = if p.abs() < 1e-300 { 0.0 } else { acc / p };
    }
    gamma
}

/// Type-II Anderson acceleration: least-squares combination of the last
/// `anderson_memory` residuals (memory 1 degenerates to Picard), with the
/// ridge-regularized normal equations and a mixing parameter blending
/// iterates and map images.
pub fn solve_anderson<T: Scalar>(
    problem: &FixedPointProblem<'_, T>,
    z0: &[T],
    cfg: &SolverConfig,
) -> Result<SolveReport<T>> {
    cfg.validate()?;
    let n = problem.dim();
    if z0.len() != n {
        return Err(Error::dimension(format!(
            "initial iterate has dimension {}, problem expects {}",
            z0.len(),
            n
        )));
    }
    let mix = cfg.anderson_mixing;
    let m = cfg.anderson_memory;

    let mut z = z0.to_vec();
    let escape_norm =
        ESCAPE_FACTOR * (z0.iter().map(|v| v.to_f64_c().powi(2)).sum::<f64>().sqrt() + 1.0);
    let mut history = Vec::new();
    let mut monitor = DivergenceMonitor::new(cfg.stagnation_window, cfg.tol);

    // Difference histories: dz_i = z_{i+1} - z_i, df_i = f_{i+1} - f_i,
    // where f = F(z) - z. At most m - 1 columns (memory counts iterates).
    let mut dz_cols: Vec<Vec<f64>> = Vec::new();
    let mut df_cols: Vec<Vec<f64>> = Vec::new();
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None; // (z, f) as f64
    let mut best: Option<(f64, Vec<T>)> = None;

    for k in 0..cfg.max_iters {
        let fz = problem.eval(&z, k)?;
        let f: Vec<f64> = z
            .iter()
            .zip(fz.iter())
            .map(|(&a, &b)| (b - a).to_f64_c())
            .collect();
        let abs = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let znorm = z.iter().map(|v| v.to_f64_c().powi(2)).sum::<f64>().sqrt();
        let rel = abs / (znorm + 1.0);
        history.push(rel);
        if znorm > escape_norm {
            return Ok(SolveReport {
                solution: z,
                iterations: k + 1,
                residual_history: history,
                status: SolveStatus::Diverged,
            });
        }
        if rel <= cfg.tol {
            return Ok(SolveReport {
                solution: z,
                iterations: k + 1,
                residual_history: history,
                status: SolveStatus::Converged,
            });
        }
        // Safeguard: a badly extrapolated iterate restarts the memory from
        // the best point seen instead of poisoning the histories.
        if let Some((best_abs, best_z)) = &best {
            if abs > 10.0 * best_abs && rel > 100.0 * cfg.tol && !df_cols.is_empty() {
                z = best_z.clone();
                dz_cols.clear();
                df_cols.clear();
                prev = None;
                continue;
            }
        }
        if best.as_ref().is_none_or(|(b, _)| abs < *b) {
            best = Some((abs, z.clone()));
        }
        if monitor.observe(abs, rel) {
            return Ok(SolveReport {
                solution: z,
                iterations: k + 1,
                residual_history: history,
                status: SolveStatus::Diverged,
            });
        }

        let z_f64: Vec<f64> = z.iter().map(|v| v.to_f64_c()).collect();
        if let Some((pz, pf)) = prev.take() {
            if dz_cols.len() + 1 >= m && !dz_cols.is_empty() {
                dz_cols.remove(0);
                df_cols.remove(0);
            }
            if m > 1 {
                dz_cols.push(z_f64.iter().zip(pz.iter()).map(|(a, b)| a - b).collect());
                df_cols.push(f.iter().zip(pf.iter()).map(|(a, b)| a - b).collect());
            }
        }

        let kcols = df_cols.len();
        let mut next = vec![0.0f64; n];
        if kcols == 0 {
            for i in 0..n {
                next[i] = z_f64[i] + mix * f[i];
            }
        } else {
            let mut gram = vec![0.0f64; kcols * kcols];
            let mut rhs = vec![0.0f64; kcols];
            for a in 0..kcols {
                for b in a..kcols {
                    let dot: f64 = df_cols[a]
                        .iter()
                        .zip(df_cols[b].iter())
                        .map(|(x, y)| x * y)
                        .sum();
                    gram[a * kcols + b] = dot;
                    gram[b * kcols + a] = dot;
                }
                rhs[a] = df_cols[a].iter().zip(f.iter()).map(|(x, y)| x * y).sum();
            }
            let gamma = solve_normal_equations(&mut gram, &mut rhs, kcols, cfg.anderson_ridge);
            for i in 0..n {
                let mut v = z_f64[i] + mix * f[i];
                for (c, g) in gamma.iter().enumerate() {
                    v -= g * (dz_cols[c][i] + mix * df_cols[c][i]);
                }
                next[i] = v;
            }
        }

        prev = Some((z_f64, f));
        z = next.into_iter().map(T::from_f64_c).collect();
    }
    Ok(SolveReport {
        solution: z,
        iterations: cfg.max_iters,
        residual_history: history,
        status: SolveStatus::MaxIters,
    })
}

/// One Douglas-Rachford splitting step:
/// `T(y) = y/2 + (2*proj - I)((2*prox_f - I)(y)) / 2`.
pub fn drs_step<T: Scalar>(
    prox_f: impl Fn(&[T]) -> Result<Vec<T>>,
    proj: impl Fn(&[T]) -> Result<Vec<T>>,
    y: &[T],
) -> Result<Vec<T>> {
    let half = T::from_f64_c(0.5);
    let two = T::from_f64_c(2.0);
    let a = prox_f(y)?;
    if a.len() != y.len() {
        return Err(Error::dimension("prox_f changed dimension"));
    }
    let reflected: Vec<T> = a
        .iter()
        .zip(y.iter())
        .map(|(&ai, &yi)| two * ai - yi)
        .collect();
    let b = proj(&reflected)?;
    if b.len() != y.len() {
        return Err(Error::dimension("proj changed dimension"));
    }
    Ok(y.iter()
        .zip(reflected.iter())
        .zip(b.iter())
        .map(|((&yi, &ri), &bi)| half * yi + half * (two * bi - ri))
        .collect())
}

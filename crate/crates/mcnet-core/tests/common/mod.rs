//! Shared oracles for the integration suites: dense linear algebra built
//! independently of the library's solver paths.

#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

pub mod equiv;
pub mod gradcheck;

use mcnet_core::measurement::MeasurementModel;
use mcnet_core::tensor::ImageTensor;

/// Dense column-major-free matrix as rows of Vec<f64>.
#[derive(Clone)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Dense {
        let mut out = Dense::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    pub fn matmul(&self, other: &Dense) -> Dense {
        assert_eq!(self.cols, other.rows);
        let mut out = Dense::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let v = self.at(r, k);
                if v == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    *out.at_mut(r, c) += v * other.at(k, c);
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += self.at(r, c) * x[c];
            }
            out[r] = acc;
        }
        out
    }

    pub fn scaled_add(&self, s: f64) -> Dense {
        // self + s * I
        assert_eq!(self.rows, self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            *out.at_mut(i, i) += s;
        }
        out
    }
}

/// Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Dense, b: &[f64]) -> Vec<f64> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if m[row * n + col].abs() > m[piv * n + col].abs() {
                piv = row;
            }
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
            }
            x.swap(col, piv);
        }
        let p = m[col * n + col];
        assert!(p.abs() > 1e-300, "singular dense system");
        for row in col + 1..n {
            let f = m[row * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m[row * n + j] -= f * m[col * n + j];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        for j in col + 1..n {
            x[col] -= m[col * n + j] * x[j];
        }
        x[col] /= m[col * n + col];
    }
    x
}

/// Materialize a linear map `R^n -> R^m` by probing unit vectors.
pub fn materialize(mut apply: impl FnMut(&[f64]) -> Vec<f64>, n: usize) -> Dense {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        cols.push(apply(&e));
    }
    let m = cols[0].len();
    let mut out = Dense::zeros(m, n);
    for (c, col) in cols.iter().enumerate() {
        assert_eq!(col.len(), m);
        for r in 0..m {
            *out.at_mut(r, c) = col[r];
        }
    }
    out
}

/// Dense matrix of the measurement operator bound to its HR shape.
pub fn dense_operator(model: &MeasurementModel<f64>) -> Dense {
    let (hh, hw) = model.hr_shape();
    let n = hh * hw;
    materialize(
        |e: &[f64]| {
            let img = ImageTensor::new(hh, hw, 1, e.to_vec()).unwrap();
            model.apply(&img).unwrap().into_vec()
        },
        n,
    )
}

/// Dense oracle for the affine projection: `q + A^T (A A^T)^{-1} (b - A q)`.
pub fn dense_project_affine(a: &Dense, b: &[f64], q: &[f64]) -> Vec<f64> {
    let at = a.transpose();
    let gram = a.matmul(&at); // m x m
    let aq = a.matvec(q);
    let resid: Vec<f64> = b.iter().zip(aq.iter()).map(|(x, y)| x - y).collect();
    let y = gauss_solve(&gram, &resid);
    let corr = at.matvec(&y);
    q.iter().zip(corr.iter()).map(|(a, b)| a + b).collect()
}

/// Dense oracle for the ball projection via bisection on the KKT multiplier:
/// solve `(I + mu A^T A) x = q + mu A^T b` with a dense LU per trial `mu`.
pub fn dense_project_ball(a: &Dense, b: &[f64], q: &[f64], eps: f64) -> Vec<f64> {
    let at = a.transpose();
    let residual_norm = |x: &[f64]| -> f64 {
        a.matvec(x)
            .iter()
            .zip(b.iter())
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt()
    };
    if residual_norm(q) <= eps {
        return q.to_vec();
    }
    let ata = at.matmul(a);
    let atb = at.matvec(b);
    let solve_for = |mu: f64| -> Vec<f64> {
        let mut m = ata.clone();
        for v in &mut m.data {
            *v *= mu;
        }
        let m = m.scaled_add(1.0);
        let rhs: Vec<f64> = q.iter().zip(atb.iter()).map(|(x, y)| x + mu * y).collect();
        gauss_solve(&m, &rhs)
    };
    let mut hi = 1.0;
    while residual_norm(&solve_for(hi)) > eps {
        hi *= 2.0;
        assert!(hi < 1e18, "oracle bracket failure");
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual_norm(&solve_for(mid)) > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    solve_for(hi)
}

/// Orthonormal basis of null(A) from the projector `I - A^T (A A^T)^{-1} A`
/// applied to unit vectors, Gram-Schmidt cleaned.
pub fn null_space_basis(a: &Dense) -> Vec<Vec<f64>> {
    let n = a.cols;
    let at = a.transpose();
    let gram = a.matmul(&at);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        let ae = a.matvec(&e);
        let y = gauss_solve(&gram, &ae);
        let corr = at.matvec(&y);
        let mut v: Vec<f64> = e.iter().zip(corr.iter()).map(|(a, b)| a - b).collect();
        for u in &basis {
            let d: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u.iter()) {
                *vi -= d * ui;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

/// Largest singular value by symmetric Jacobi diagonalization of `M^T M`.
pub fn dense_sigma_max(m: &Dense) -> f64 {
    let mtm = m.transpose().matmul(m);
    let n = mtm.rows;
    let mut a = mtm.data.clone();
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
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
            }
        }
    }
    let mut lam_max = 0.0f64;
    for i in 0..n {
        lam_max = lam_max.max(a[i * n + i]);
    }
    lam_max.max(0.0).sqrt()
}

pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn vec_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
}

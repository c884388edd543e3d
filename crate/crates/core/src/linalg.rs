//! Small dense linear-algebra routines shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric matrix function applied through the eigen-decomposition.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Raise every eigenvalue of a symmetric matrix to at least `floor`.
pub fn eigen_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    sym_apply(m, |l| l.max(floor))
}

/// Solve `s x = b` for symmetric positive-definite `s` by Cholesky.
pub fn spd_solve(s: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    symmetrize(s).cholesky().map(|c| c.solve(b))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Outcome of [`nnls`].
#[derive(Clone, Debug)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// `A^T (A x - b)`, half the objective gradient.
    pub half_gradient: DVector<f64>,
}

/// Lawson–Hanson active-set solve of `min ||A x - b||^2` subject to `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<NnlsSolution> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(Error::DimensionMismatch(format!("nnls: A has {m} rows, b has {}", b.len())));
    }
    let scale = a.amax().max(1e-300) * b.amax().max(a.amax()) * (m.max(n) as f64);
    let tol = 1e-13 * scale;
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let mut iterations = 0;
    let max_iter = 30 * n.max(1) + 100;

    let subsolve = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let mut s = DVector::zeros(n);
        if idx.is_empty() {
            return s;
        }
        let ap = a.select_columns(&idx);
        let sol = ap
            .svd(true, true)
            .solve(b, 1e-15)
            .unwrap_or_else(|_| DVector::zeros(idx.len()));
        for (k, &j) in idx.iter().enumerate() {
            s[j] = sol[k];
        }
        s
    };

    loop {
        let w = a.transpose() * (b - a * &x);
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(t) = cand else { break };
        passive[t] = true;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::SolverFailure("nnls iteration cap reached".into()));
            }
            let s = subsolve(&passive);
            if (0..n).filter(|&j| passive[j]).all(|j| s[j] > 0.0) {
                x = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for j in 0..n {
                if passive[j] && s[j] <= 0.0 {
                    alpha = alpha.min(x[j] / (x[j] - s[j]));
                }
            }
            x += (s - &x) * alpha;
            for j in 0..n {
                if passive[j] && x[j] <= 1e-15 * x.amax().max(1.0) {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    let half_gradient = a.transpose() * (a * &x - b);
    Ok(NnlsSolution { x, iterations, half_gradient })
}

/// Discrete algebraic Riccati equation by value iteration.
///
/// Returns `(P, K)` with `K = (R + B'PB)^-1 B'PA` so that `u = -K x` is optimal
/// for `x+ = A x + B u`.
pub fn dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    max_iter: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::DimensionMismatch("dare: inconsistent matrix shapes".into()));
    }
    let mut p = q.clone();
    let gain = |p: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let s = r + b.transpose() * p * b;
        spd_solve(&s, &(b.transpose() * p * a)).or_else(|| {
            s.clone().try_inverse().map(|si| si * b.transpose() * p * a)
        })
    };
    for _ in 0..max_iter {
        let k = gain(&p).ok_or_else(|| Error::NotStabilizable("Riccati gain solve failed".into()))?;
        let next = symmetrize(&(q + a.transpose() * &p * a - a.transpose() * &p * b * &k));
        let diff = (&next - &p).amax();
        let size = next.amax().max(1.0);
        if !size.is_finite() || size > 1e14 {
            return Err(Error::NotStabilizable("Riccati iteration diverged".into()));
        }
        p = next;
        if diff <= 1e-12 * size {
            let k = gain(&p).ok_or_else(|| Error::NotStabilizable("Riccati gain solve failed".into()))?;
            return Ok((p, k));
        }
    }
    Err(Error::NotStabilizable(format!("Riccati iteration did not converge in {max_iter} steps")))
}

/// `∫_0^t exp(F s) ds` together with `exp(F t)`, via the augmented exponential.
pub fn exp_and_integral(f: &DMatrix<f64>, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = f.nrows();
    let mut aug = DMatrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(f * t));
    aug.view_mut((0, n), (n, n)).copy_from(&(DMatrix::identity(n, n) * t));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, n)).into_owned())
}

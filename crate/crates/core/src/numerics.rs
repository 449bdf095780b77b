//! Dense row-major matrices, a deterministic symmetric eigensolver, and a
//! least-squares line fit.
//!
//! Everything here is sized for desk-scale problems (hundreds of rows, not
//! millions). The eigensolver runs cyclic Jacobi sweeps so that results are
//! reproducible to the bit on a fixed platform: no pivoting heuristics, no
//! threading, and a fixed post-ordering of the eigenpairs.

use thiserror::Error;

/// Convergence and symmetry tolerance used when callers do not pick one.
pub const DEFAULT_EIGEN_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix entries must be finite")]
    NonFiniteEntry,
    #[error("matrix is not symmetric within tol {tol}: max asymmetry {max_asym}")]
    NonSymmetric { max_asym: f64, tol: f64 },
    #[error("spectral function produced a non-finite value at eigenvalue {lambda}")]
    NonFinite { lambda: f64 },
    #[error("eigensolver did not converge within the sweep limit")]
    NoConvergence,
    #[error("least-squares fit is degenerate")]
    DegenerateFit,
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Rejects wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch(format!(
                "{rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFiniteEntry);
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self * other`, accumulated in i-k-j order for cache friendliness.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul {}x{} by {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                let o_row = out.row_mut(i);
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dim");
        (0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect()
    }

    /// `selfᵀ * v` without materializing the transpose.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec dim");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let r = self.row(i);
            let s = v[i];
            if s == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(r) {
                *o += s * a;
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape");
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        )
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub shape");
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Eigenpairs of a symmetric matrix, ordered deterministically.
///
/// Eigenvalues descend; exact ties order by the lexicographically larger
/// eigenvector. Every eigenvector's first nonzero entry is positive, and
/// column `k` of `eigenvectors` pairs with `eigenvalues[k]`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub dim: usize,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SymEigen {
    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        self.eigenvectors.col(k)
    }
}

/// Full eigendecomposition by cyclic Jacobi sweeps.
///
/// `tol` bounds both the accepted input asymmetry and the off-diagonal mass
/// left when the sweeps stop. Use [`DEFAULT_EIGEN_TOL`] unless a caller has a
/// reason to loosen it.
pub fn sym_eigendecompose(m: &Matrix, tol: f64) -> Result<SymEigen, NumericsError> {
    if m.rows() != m.cols() {
        return Err(NumericsError::ShapeMismatch(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let max_asym = m.max_asymmetry();
    let scale = m.max_abs().max(1.0);
    if max_asym > tol * scale {
        return Err(NumericsError::NonSymmetric { max_asym, tol });
    }

    let mut a = m.clone();
    // Work on the symmetrized matrix so tiny input asymmetry cannot leak in.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut v = Matrix::identity(n);

    let frob = a.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let mut converged = false;
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a.get(i, j) * a.get(i, j);
            }
        }
        if off.sqrt() <= tol * frob {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence);
    }

    let mut vals: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let mut vecs: Vec<Vec<f64>> = (0..n).map(|k| v.col(k)).collect();
    for vec in &mut vecs {
        if let Some(first) = vec.iter().find(|x| **x != 0.0) {
            if *first < 0.0 {
                for x in vec.iter_mut() {
                    *x = -*x;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        vals[j]
            .partial_cmp(&vals[i])
            .unwrap()
            .then_with(|| lex_cmp(&vecs[j], &vecs[i]))
    });
    vals = order.iter().map(|&i| vals[i]).collect();
    let mut cols = Matrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        for i in 0..n {
            cols.set(i, k, vecs[src][i]);
        }
    }
    Ok(SymEigen {
        dim: n,
        eigenvalues: vals,
        eigenvectors: cols,
    })
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap() {
            std::cmp::Ordering::Equal => continue,
            ord => return ord,
        }
    }
    std::cmp::Ordering::Equal
}

/// Applies a scalar function to a symmetric matrix through its eigenpairs:
/// `V diag(f(lambda)) Vᵀ`. The triple-product accumulation makes the output
/// bitwise symmetric.
pub fn matfn_sym(e: &SymEigen, f: impl Fn(f64) -> f64) -> Result<Matrix, NumericsError> {
    let n = e.dim;
    let mut fvals = Vec::with_capacity(n);
    for &lambda in &e.eigenvalues {
        let fv = f(lambda);
        if !fv.is_finite() {
            return Err(NumericsError::NonFinite { lambda });
        }
        fvals.push(fv);
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += fvals[k] * e.eigenvectors.get(i, k) * e.eigenvectors.get(j, k);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Ordinary least-squares line `y = m x + c`.
///
/// Needs at least two points and nonzero variance in `xs`.
pub fn least_squares_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64), NumericsError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(NumericsError::ShapeMismatch(format!(
            "line fit needs matching xs/ys with at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    if sxx == 0.0 {
        return Err(NumericsError::DegenerateFit);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let m = sxy / sxx;
    Ok((m, ybar - m * xbar))
}

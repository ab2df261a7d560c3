//! Non-differentiable numerical kernels: ridge pseudo-inverse, PCA
//! eigenvalues by cyclic Jacobi rotations, cosine similarity.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape("matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (r, c) = t.dims2()?;
        Self::new(r, c, t.to_f64_vec())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64([self.rows, self.cols], &self.data).expect("matrix extents are positive")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                &[self.rows, self.cols],
                &[rhs.rows, rhs.cols],
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        crate::tensor::kernels::gemm_nn(self.rows, self.cols, rhs.cols, &self.data, &rhs.data, &mut out.data);
        Ok(out)
    }

    /// Largest absolute entry of `self − rhs`.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

const PIVOT_RTOL: f64 = 1e-12;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::shape("cholesky", &[a.rows, a.cols], &[n, n]));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        // Pivots lost to cancellation count as zero.
        if !(d > PIVOT_RTOL * a.get(j, j).abs()) || !d.is_finite() {
            return Err(Error::Conditioning { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Solves `A X = B` for SPD `A` given its Cholesky factor.
fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows;
    let mut x = b.clone();
    for col in 0..b.cols {
        for i in 0..n {
            let mut s = x.get(i, col);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, col);
            }
            x.set(i, col, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, col);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, s / l.get(i, i));
        }
    }
    x
}

pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    Ok(cholesky_solve(&l, &Matrix::identity(a.rows)))
}

/// `(WᵀW + ridge·I)⁻¹ Wᵀ` for a tall `W` (rows ≥ cols).
///
/// With `ridge = 0` and full column rank this is the Moore–Penrose
/// pseudo-inverse.
pub fn pinv_tall(w: &Matrix, ridge: f64) -> Result<Matrix> {
    if w.rows < w.cols {
        return Err(Error::Param(format!(
            "pinv_tall needs rows >= cols, got {}x{}",
            w.rows, w.cols
        )));
    }
    if ridge < 0.0 {
        return Err(Error::Param(format!("ridge must be non-negative, got {ridge}")));
    }
    let wt = w.transpose();
    let mut gram = wt.matmul(w)?;
    for i in 0..gram.rows {
        gram.data[i * gram.cols + i] += ridge;
    }
    let l = cholesky(&gram)?;
    Ok(cholesky_solve(&l, &wt))
}

/// Population covariance (1/N) of the rows of `x`.
pub fn covariance(x: &Matrix) -> Result<Matrix> {
    if x.rows < 2 {
        return Err(Error::Input(format!(
            "covariance needs at least 2 rows, got {}",
            x.rows
        )));
    }
    let (n, d) = (x.rows, x.cols);
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov.data[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.data[i * d + j] / n as f64;
            cov.data[i * d + j] = v;
            cov.data[j * d + i] = v;
        }
    }
    Ok(cov)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
/// sorted descending.
pub fn symmetric_eigvals(a: &Matrix) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::shape("symmetric_eigvals", &[a.rows, a.cols], &[n, n]));
    }
    let mut m = a.clone();
    let scale: f64 = m.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m.get(p, p), m.get(q, q));
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

/// Eigenvalues of the population covariance of `codes` (one code per
/// row), descending, with round-off negatives clamped to zero.
pub fn pca_eigvals(codes: &Matrix) -> Result<Vec<f64>> {
    let cov = covariance(codes)?;
    Ok(symmetric_eigvals(&cov)?
        .into_iter()
        .map(|v| v.max(0.0))
        .collect())
}

/// `u·v / (‖u‖‖v‖ + 1e-12)`; zero vectors give 0.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot / (nu * nv + 1e-12)).clamp(-1.0, 1.0)
}

//! Dense kernels used by the losses and the classifier: a row-major matrix,
//! temperature softmax, Cholesky-based multivariate Gaussian densities,
//! per-class mean/covariance estimation and a central-difference gradient
//! oracle.
//!
//! Everything is `f64`. Probability paths go through log-sum-exp so that
//! large logits or tight covariances never overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ClassId;

/// Default diagonal loading added to every estimated covariance.
pub const DEFAULT_SHRINKAGE: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Row-major dense matrix of finite doubles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

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

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero-width rows
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Appends rows at the bottom.
    pub fn push_rows(&mut self, other: &DenseMatrix) -> Result<()> {
        if other.cols != self.cols {
            return Err(Error::Shape(format!(
                "cannot append {}-column rows to a {}-column matrix",
                other.cols, self.cols
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Copy of the sub-block of columns `start..end`.
    pub fn columns(&self, start: usize, end: usize) -> DenseMatrix {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[start..end]);
        }
        DenseMatrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// `self · v`
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: {} columns vs vector of length {}",
                self.cols,
                v.len()
            )));
        }
        Ok(self.iter_rows().map(|r| dot(r, v)).collect())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols && (0..self.rows).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &DenseMatrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "add_scaled: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// `log Σ exp(vᵢ)`, stable for large magnitudes. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `log softmax(logits / tau)`.
pub fn log_softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    let lse = logsumexp(&scaled);
    Ok(scaled.into_iter().map(|s| s - lse).collect())
}

/// Temperature-scaled softmax, computed with max subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    lower: DenseMatrix,
}

impl Cholesky {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::Shape(format!(
                "cholesky of a non-square {}x{} matrix",
                a.rows(),
                a.cols()
            )));
        }
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a.get(j, j);
            for k in 0..j {
                diag -= l.get(j, k) * l.get(j, k);
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::Numeric(format!(
                    "matrix is not positive definite (pivot {j} = {diag:e})"
                )));
            }
            let ljj = diag.sqrt();
            l.set(j, j, ljj);
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / ljj);
            }
        }
        Ok(Self { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| self.lower.get(i, i).ln()).sum::<f64>() * 2.0
    }

    /// Solves `L y = b`.
    fn forward_sub(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lower.get(i, k) * y[k];
            }
            y[i] = s / self.lower.get(i, i);
        }
        y
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = self.forward_sub(b);
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.lower.get(k, i) * x[k];
            }
            x[i] = s / self.lower.get(i, i);
        }
        x
    }

    /// `bᵀ A⁻¹ b`
    pub fn quad_form(&self, b: &[f64]) -> f64 {
        let y = self.forward_sub(b);
        dot(&y, &y)
    }
}

/// Class-conditional Gaussian over logit space.
#[derive(Debug, Clone)]
pub struct ClassGaussian {
    pub class_id: ClassId,
    mean: Vec<f64>,
    covariance: DenseMatrix,
    sample_count: usize,
    chol: Cholesky,
}

impl ClassGaussian {
    /// Validates shapes and symmetry and factorizes the covariance.
    pub fn new(class_id: ClassId, mean: Vec<f64>, covariance: DenseMatrix, sample_count: usize) -> Result<Self> {
        if covariance.rows() != mean.len() || covariance.cols() != mean.len() {
            return Err(Error::Shape(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                covariance.rows(),
                covariance.cols()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite mean".into()));
        }
        if !covariance.is_symmetric(1e-12) {
            return Err(Error::Numeric("covariance is not symmetric".into()));
        }
        let chol = Cholesky::factor(&covariance)?;
        Ok(Self {
            class_id,
            mean,
            covariance,
            sample_count,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DenseMatrix {
        &self.covariance
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    fn centered(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Shape(format!(
                "point of dimension {} for a {}-dimensional Gaussian",
                z.len(),
                self.dim()
            )));
        }
        Ok(z.iter().zip(&self.mean).map(|(a, b)| a - b).collect())
    }

    pub fn logpdf(&self, z: &[f64]) -> Result<f64> {
        let d = self.centered(z)?;
        let n = self.dim() as f64;
        Ok(-0.5 * (n * LN_2PI + self.chol.log_det() + self.chol.quad_form(&d)))
    }

    /// `Σ⁻¹`, column by column from the Cholesky factor.
    pub fn precision(&self) -> DenseMatrix {
        let n = self.dim();
        let mut out = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            for (i, v) in self.chol.solve(&e).into_iter().enumerate() {
                out.set(i, j, v);
            }
            e[j] = 0.0;
        }
        out
    }

    /// Whether the covariance was estimated from its diagonal only.
    pub fn is_diagonal_fit(&self) -> bool {
        self.sample_count <= self.dim()
    }

    /// Gradient of [`Self::logpdf`] with respect to `z`: `-Σ⁻¹ (z - μ)`.
    pub fn grad_logpdf(&self, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.centered(z)?;
        Ok(self.chol.solve(&d).into_iter().map(|v| -v).collect())
    }
}

/// `log 𝒩(z | μ, Σ)`.
pub fn gaussian_logpdf(z: &[f64], g: &ClassGaussian) -> Result<f64> {
    g.logpdf(z)
}

/// Mean and shrunk covariance of one class's samples.
///
/// The covariance is the unbiased sample covariance plus `epsilon·I`. With no
/// more samples than dimensions the off-diagonal entries are dropped, since
/// the full estimate would be rank deficient.
pub fn estimate_class_stats(class_id: ClassId, samples: &[Vec<f64>], epsilon: f64) -> Result<ClassGaussian> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!("shrinkage must be positive, got {epsilon}")));
    }
    let Some(first) = samples.first() else {
        return Err(Error::Parameter(format!(
            "class {class_id} has no samples to estimate statistics from"
        )));
    };
    let dim = first.len();
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::Shape(format!("samples of dimension {} and {}", dim, bad.len())));
    }
    let count = samples.len();
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);

    let mut cov = DenseMatrix::zeros(dim, dim);
    if count > 1 {
        let full = count > dim;
        let denom = (count - 1) as f64;
        for s in samples {
            let d: Vec<f64> = s.iter().zip(&mean).map(|(a, b)| a - b).collect();
            for i in 0..dim {
                if full {
                    for j in 0..=i {
                        let v = cov.get(i, j) + d[i] * d[j] / denom;
                        cov.set(i, j, v);
                    }
                } else {
                    let v = cov.get(i, i) + d[i] * d[i] / denom;
                    cov.set(i, i, v);
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                let v = cov.get(i, j);
                cov.set(j, i, v);
            }
        }
    }
    for i in 0..dim {
        let v = cov.get(i, i) + epsilon;
        cov.set(i, i, v);
    }
    ClassGaussian::new(class_id, mean, cov, count)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("function is not finite around coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest relative discrepancy between two gradients, with an absolute floor
/// so that entries near zero are compared absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

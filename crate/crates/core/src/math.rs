//! Numerical primitives shared by the mixture fit and the ensemble: a small
//! dense matrix, special functions, Gaussian log-densities and quantiles.

use std::f64::consts::PI;

use crate::error::{OedpmError, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Every entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(OedpmError::usage(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(OedpmError::Numeric(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(OedpmError::usage(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact rejects a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(OedpmError::DimensionMismatch {
                expected: self.cols,
                found: rhs.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(rhs.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(OedpmError::usage(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for r in self.rows() {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Digamma function ψ(x) for x > 0.
///
/// Arguments below 6 are shifted upward with ψ(x) = ψ(x + 1) − 1/x, then the
/// asymptotic series
/// ψ(x) ≈ ln x − 1/(2x) − Σ B₂ₙ / (2n x²ⁿ)
/// is evaluated through the x⁻¹⁴ term. The truncation error at x = 6 is below
/// 2e-13. The 1/x term of the shift is subtracted last so that for tiny x the
/// only rounding that matters is the final one.
pub fn digamma(x: f64) -> Result<f64> {
    if x.is_nan() || x <= 0.0 {
        return Err(OedpmError::Domain(format!(
            "digamma requires x > 0, got {x}"
        )));
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }

    let mut y = x;
    let mut lead = 0.0;
    let mut rest = 0.0;
    if y < 6.0 {
        lead = 1.0 / y;
        y += 1.0;
        while y < 6.0 {
            rest += 1.0 / y;
            y += 1.0;
        }
    }

    // Bernoulli coefficients B₂ₙ / (2n), n = 1..7
    const COEF: [f64; 7] = [
        1.0 / 12.0,
        -1.0 / 120.0,
        1.0 / 252.0,
        -1.0 / 240.0,
        1.0 / 132.0,
        -691.0 / 32760.0,
        1.0 / 12.0,
    ];
    let inv2 = 1.0 / (y * y);
    let mut series = 0.0;
    for c in COEF.iter().rev() {
        series = series * inv2 + c;
    }
    series *= inv2;
    let asym = y.ln() - 0.5 / y - series;

    Ok((asym - rest) - lead)
}

/// Natural log of the gamma function for x > 0.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Multivariate log-gamma: ln Γ_d(a) = d(d−1)/4 · ln π + Σ_{j=1}^{d} ln Γ(a + (1 − j)/2).
pub fn ln_multigamma(a: f64, d: usize) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * PI.ln()
        + (1..=d)
            .map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0))
            .sum::<f64>()
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(OedpmError::usage("log_sum_exp of an empty vector"));
    }
    Ok(log_sum_exp_unchecked(values))
}

#[inline]
pub(crate) fn log_sum_exp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(OedpmError::DimensionMismatch {
                expected: n,
                found: a.ncols(),
            });
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(OedpmError::NotPositiveDefinite { pivot: j });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// ln |A|.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solves `L z = b` in place.
    pub fn forward_solve(&self, b: &mut [f64]) {
        let l = &self.lower;
        for i in 0..b.len() {
            let row = l.row(i);
            let mut s = b[i];
            for k in 0..i {
                s -= row[k] * b[k];
            }
            b[i] = s / row[i];
        }
    }

    /// `vᵀ A⁻¹ v`.
    pub fn inv_quad(&self, v: &[f64]) -> f64 {
        let mut z = v.to_vec();
        self.forward_solve(&mut z);
        z.iter().map(|x| x * x).sum()
    }

    /// `tr(A⁻¹ B)` for symmetric `B`.
    pub fn inv_trace(&self, b: &Matrix) -> f64 {
        // Σ_j (A⁻¹ b_j)_j, two triangular solves per column

        let n = self.dim();
        let l = &self.lower;
        let mut total = 0.0;
        let mut col = vec![0.0; n];
        for j in 0..n {
            for (i, c) in col.iter_mut().enumerate() {
                *c = b[(i, j)];
            }
            self.forward_solve(&mut col);
            // back substitution with Lᵀ
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in (i + 1)..n {
                    s -= l[(k, i)] * col[k];
                }
                col[i] = s / l[(i, i)];
            }
            total += col[j];
        }
        total
    }
}

/// A covariance (or scale) matrix stored either as its diagonal or densely.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Full(Matrix),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(d) => d.len(),
            Covariance::Full(m) => m.nrows(),
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Covariance::Diagonal(d) => d.clone(),
            Covariance::Full(m) => m.diagonal(),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            Covariance::Diagonal(d) => Matrix::from_diagonal(d),
            Covariance::Full(m) => m.clone(),
        }
    }

    /// Returns a copy with every entry divided by `s`.
    pub fn scaled(&self, s: f64) -> Covariance {
        match self {
            Covariance::Diagonal(d) => Covariance::Diagonal(d.iter().map(|v| v / s).collect()),
            Covariance::Full(m) => {
                let mut out = m.clone();
                out.data.iter_mut().for_each(|v| *v /= s);
                Covariance::Full(out)
            }
        }
    }

    pub fn add_to_diagonal(&mut self, ridge: f64) {
        match self {
            Covariance::Diagonal(d) => d.iter_mut().for_each(|v| *v += ridge),
            Covariance::Full(m) => {
                for i in 0..m.nrows() {
                    m[(i, i)] += ridge;
                }
            }
        }
    }

    pub fn factor(&self) -> Result<Factor> {
        Factor::new(self)
    }
}

/// Factorization of a [`Covariance`] supporting log-determinants, quadratic
/// forms and traces against its inverse.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// Reciprocals of the diagonal entries.
    Diagonal { inv: Vec<f64>, log_det: f64 },
    Full(Cholesky),
}

impl Factor {
    pub fn new(cov: &Covariance) -> Result<Self> {
        match cov {
            Covariance::Diagonal(d) => {
                let mut inv = Vec::with_capacity(d.len());
                let mut log_det = 0.0;
                for (j, &v) in d.iter().enumerate() {
                    if !(v > 0.0) || !v.is_finite() {
                        return Err(OedpmError::NotPositiveDefinite { pivot: j });
                    }
                    inv.push(1.0 / v);
                    log_det += v.ln();
                }
                Ok(Factor::Diagonal { inv, log_det })
            }
            Covariance::Full(m) => Ok(Factor::Full(Cholesky::new(m)?)),
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            Factor::Diagonal { log_det, .. } => *log_det,
            Factor::Full(c) => c.log_det(),
        }
    }

    /// `(x − m)ᵀ A⁻¹ (x − m)`.
    #[inline]
    pub fn mahalanobis_sq(&self, x: &[f64], m: &[f64]) -> f64 {
        match self {
            Factor::Diagonal { inv, .. } => x
                .iter()
                .zip(m)
                .zip(inv)
                .map(|((a, b), w)| {
                    let d = a - b;
                    d * d * w
                })
                .sum(),
            Factor::Full(c) => {
                let mut z: Vec<f64> = x.iter().zip(m).map(|(a, b)| a - b).collect();
                c.forward_solve(&mut z);
                z.iter().map(|v| v * v).sum()
            }
        }
    }

    /// `tr(A⁻¹ B)`.
    pub fn inv_trace(&self, b: &Covariance) -> f64 {
        match (self, b) {
            (Factor::Diagonal { inv, .. }, b) => {
                inv.iter().zip(b.diagonal()).map(|(w, v)| w * v).sum()
            }
            (Factor::Full(c), b) => c.inv_trace(&b.to_dense()),
        }
    }
}

/// A Gaussian with a pre-factored covariance, for repeated evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    mean: Vec<f64>,
    factor: Factor,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mean: Vec<f64>, cov: &Covariance) -> Result<Self> {
        if cov.dim() != mean.len() {
            return Err(OedpmError::DimensionMismatch {
                expected: mean.len(),
                found: cov.dim(),
            });
        }
        let factor = Factor::new(cov)?;
        let log_norm = -0.5 * (mean.len() as f64 * LN_2PI + factor.log_det());
        Ok(Self {
            mean,
            factor,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    #[inline]
    pub fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.factor.mahalanobis_sq(x, &self.mean)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.mean.len() {
            return Err(OedpmError::DimensionMismatch {
                expected: self.mean.len(),
                found: x.len(),
            });
        }
        Ok(self.log_density_unchecked(x))
    }
}

/// `ln φ_d(x; mean, cov)`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], cov: &Covariance) -> Result<f64> {
    GaussianDensity::new(mean.to_vec(), cov)?.log_density(x)
}

/// Linear-interpolation quantile on `(n − 1)·q` (the "type 7" rule).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

/// [`quantile`] for input already sorted ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(OedpmError::usage("quantile of an empty vector"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(OedpmError::usage(format!("quantile level {q} outside [0, 1]")));
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= sorted.len() {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

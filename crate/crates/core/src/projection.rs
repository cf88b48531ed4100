//! Random orthonormal subspaces for the feature-bagging side of the ensemble.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{OedpmError, Result};
use crate::math::Matrix;

const COLLAPSE_NORM: f64 = 1e-12;
const MAX_REDRAWS: usize = 100;

/// Draws a subspace dimension uniformly from
/// `[⌊min(p, 2 + √p/2)⌋, ⌊min(p, 2 + √p)⌋]`.
///
/// For p ≤ 2 both bounds equal p, so no reduction happens.
pub fn sample_subspace_dim<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Result<usize> {
    let (lo, hi) = subspace_dim_bounds(p)?;
    Ok(rng.random_range(lo..=hi))
}

/// Inclusive bounds used by [`sample_subspace_dim`].
pub fn subspace_dim_bounds(p: usize) -> Result<(usize, usize)> {
    if p == 0 {
        return Err(OedpmError::usage("subspace source dimension must be at least 1"));
    }
    let pf = p as f64;
    let root = pf.sqrt();
    let hi = (pf.min(2.0 + root).floor() as usize).max(1);
    let lo = (pf.min(2.0 + root / 2.0).floor() as usize).clamp(1, hi);
    Ok((lo, hi))
}

/// A `p × d` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    entries: Matrix,
    seed: u64,
}

impl ProjectionMatrix {
    /// Fills a `p × d` matrix with Uniform(−1, 1) draws from a stream seeded
    /// by `seed`, then orthonormalizes the columns with modified Gram–Schmidt
    /// (two passes). A column whose residual collapses below 1e-12 is redrawn.
    pub fn generate(p: usize, d: usize, seed: u64) -> Result<Self> {
        if d == 0 || d > p {
            return Err(OedpmError::usage(format!(
                "projection target dimension {d} must lie in [1, {p}]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);

        for j in 0..d {
            let mut attempt = 0;
            let column = loop {
                if attempt > MAX_REDRAWS {
                    return Err(OedpmError::Numeric(format!(
                        "projection column {j} collapsed after {MAX_REDRAWS} redraws"
                    )));
                }
                attempt += 1;
                let mut v: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
                let initial = norm(&v);
                for _pass in 0..2 {
                    for q in &cols {
                        let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                        v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= dot * qi);
                    }
                }
                let n = norm(&v);
                if n < COLLAPSE_NORM || n < COLLAPSE_NORM * initial {
                    continue;
                }
                v.iter_mut().for_each(|x| *x /= n);
                break v;
            };
            cols.push(column);
        }

        let mut entries = Matrix::zeros(p, d);
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                entries[(i, j)] = v;
            }
        }
        Ok(Self { entries, seed })
    }

    /// Wraps an existing matrix; columns must already be orthonormal to 1e-10.
    pub fn from_matrix(entries: Matrix, seed: u64) -> Result<Self> {
        let d = entries.ncols();
        if d == 0 || d > entries.nrows() {
            return Err(OedpmError::usage("projection must have 1 ≤ d ≤ p"));
        }
        let gram = entries.transpose().matmul(&entries)?;
        let err = gram.max_abs_diff(&Matrix::identity(d));
        if err > 1e-10 {
            return Err(OedpmError::Numeric(format!(
                "projection columns are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(Self { entries, seed })
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn source_dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn target_dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `data · R`.
    pub fn project(&self, data: &Matrix) -> Result<Matrix> {
        if data.ncols() != self.source_dim() {
            return Err(OedpmError::DimensionMismatch {
                expected: self.source_dim(),
                found: data.ncols(),
            });
        }
        data.matmul(&self.entries)
    }

    /// Projects a single row into `out`.
    pub fn project_row_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            for (o, &r) in out.iter_mut().zip(self.entries.row(i)) {
                *o += xi * r;
            }
        }
    }
}

/// Free-function form of [`ProjectionMatrix::project`].
pub fn project(data: &Matrix, r: &ProjectionMatrix) -> Result<Matrix> {
    r.project(data)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

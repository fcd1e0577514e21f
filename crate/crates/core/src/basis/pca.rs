//! Principal component analysis over flat sample vectors.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::SampleSet;
use crate::error::{Error, Result};
use crate::linear::{dot, LinearBasis};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;

/// Spectrum of a fit. Eigenvalues use divisor n (population covariance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub samples: usize,
    pub dim: usize,
    /// Every non-negative eigenvalue available, in decreasing order.
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
    /// Indices of kept components that carry no variance and were completed
    /// by orthogonalization.
    pub degenerate: Vec<usize>,
}

impl PcaReport {
    /// Fraction of total variance carried by the first `k` components.
    pub fn explained(&self, k: usize) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        self.eigenvalues.iter().take(k).sum::<f64>() / self.total_variance
    }
}

/// Fits `k` components to the sample set.
pub fn pca_fit(set: &SampleSet, k: usize) -> Result<(LinearBasis, PcaReport)> {
    pca_fit_samples(set.samples(), k)
}

pub fn pca_fit_samples(samples: &[Vec<f64>], k: usize) -> Result<(LinearBasis, PcaReport)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 samples, got {n}")));
    }
    if k == 0 || k > n - 1 {
        return Err(Error::InvalidArgument(format!(
            "component count {k} outside 1..={}",
            n - 1
        )));
    }
    let m = samples[0].len();
    if m == 0 || samples.iter().any(|s| s.len() != m) {
        return Err(Error::InvalidArgument("samples must share a non-zero length".into()));
    }
    if k > m {
        return Err(Error::InvalidArgument(format!("component count {k} exceeds dimension {m}")));
    }
    let nf = n as f64;
    let mut mean = vec![0.0; m];
    for s in samples {
        for (a, x) in mean.iter_mut().zip(s) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= nf);
    let centered = DMatrix::from_fn(n, m, |i, j| samples[i][j] - mean[j]);
    let total_variance = centered.iter().map(|x| x * x).sum::<f64>() / nf;

    let (values, mut rows) = if m > n {
        gram_components(&centered, k)
    } else {
        covariance_components(&centered, k)
    };
    let lmax = values.first().copied().unwrap_or(0.0).max(0.0);
    let mut degenerate = Vec::new();
    for (i, row) in rows.iter_mut().enumerate() {
        if !(values[i] > RANK_TOL * lmax) || row.iter().all(|&x| x == 0.0) {
            degenerate.push(i);
            row.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    complete_orthonormal(&mut rows, &degenerate);
    for row in rows.iter_mut() {
        fix_sign(row);
    }
    if !degenerate.is_empty() {
        warn!(
            "PCA: {} of {k} components carry no variance and were completed by orthogonalization",
            degenerate.len()
        );
    }
    let stddev: Vec<f64> = (0..k)
        .map(|i| if degenerate.contains(&i) { 0.0 } else { values[i].max(0.0).sqrt() })
        .collect();
    let eigenvalues: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let basis = LinearBasis::new(mean, rows.concat(), Some(stddev))?;
    Ok((
        basis,
        PcaReport {
            samples: n,
            dim: m,
            eigenvalues,
            total_variance,
            degenerate,
        },
    ))
}

/// Eigen-pairs sorted by decreasing eigenvalue.
fn sorted_eigen(mat: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(mat);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Dimension ≫ n: eigenvectors of the n×n Gram matrix lifted through the data.
fn gram_components(x: &DMatrix<f64>, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = x.nrows() as f64;
    let gram = (x * x.transpose()) / n;
    let (values, u) = sorted_eigen(gram);
    let lifted = u.columns(0, k).transpose() * x;
    let rows = (0..k)
        .map(|i| {
            let lambda = values[i];
            if lambda > 0.0 {
                let s = 1.0 / (n * lambda).sqrt();
                lifted.row(i).iter().map(|v| v * s).collect()
            } else {
                vec![0.0; x.ncols()]
            }
        })
        .collect();
    (values, rows)
}

fn covariance_components(x: &DMatrix<f64>, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = x.nrows() as f64;
    let cov = (x.transpose() * x) / n;
    let (values, v) = sorted_eigen(cov);
    let rows = (0..k).map(|i| v.column(i).iter().copied().collect()).collect();
    (values, rows)
}

/// Replaces the listed rows with unit vectors orthogonal to every other row,
/// taken from the standard basis in index order.
fn complete_orthonormal(rows: &mut [Vec<f64>], slots: &[usize]) {
    let Some(m) = rows.first().map(Vec::len) else {
        return;
    };
    let mut candidate = 0;
    for &slot in slots {
        while candidate < m {
            let mut v = vec![0.0; m];
            v[candidate] = 1.0;
            candidate += 1;
            for (i, r) in rows.iter().enumerate() {
                if i != slot && r.iter().any(|&x| x != 0.0) {
                    let d = dot(&v, r);
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|a| *a /= norm);
                rows[slot] = v;
                break;
            }
        }
    }
}

/// Flips the row so its entry of largest magnitude (first on ties) is positive.
fn fix_sign(row: &mut [f64]) {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if x.abs() > row[best].abs() {
            best = i;
        }
    }
    if row[best] < 0.0 {
        row.iter_mut().for_each(|x| *x = -*x);
    }
}

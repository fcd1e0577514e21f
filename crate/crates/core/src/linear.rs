//! Mean-plus-components linear models shared by the shape, albedo and
//! displacement bases.

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};

const CHUNK: usize = 4096;

/// `mean + Σ c_k · component_k`, components stored row-major (k × m).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBasis {
    mean: Vec<f64>,
    components: Vec<f64>,
    rank: usize,
    stddev: Option<Vec<f64>>,
}

impl LinearBasis {
    pub fn new(mean: Vec<f64>, components: Vec<f64>, stddev: Option<Vec<f64>>) -> Result<Self> {
        let m = mean.len();
        if m == 0 {
            return Err(Error::InvalidArgument("empty basis mean".into()));
        }
        if components.len() % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "component buffer of {} is not a multiple of {m}",
                components.len()
            )));
        }
        let rank = components.len() / m;
        if let Some(s) = &stddev {
            check_len("basis stddev", rank, s.len())?;
        }
        if mean.iter().chain(&components).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("basis entries".into()));
        }
        Ok(Self {
            mean,
            components,
            rank,
            stddev,
        })
    }

    /// Sample dimension m.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of components k.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let m = self.dim();
        &self.components[k * m..(k + 1) * m]
    }

    pub fn stddev(&self) -> Option<&[f64]> {
        self.stddev.as_deref()
    }

    /// `mean + Σ c_k B_k`.
    pub fn synthesize(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.synthesize_onto(&self.mean, coeffs)
    }

    /// `base + Σ c_k B_k`, accumulated in component order for every entry.
    pub fn synthesize_onto(&self, base: &[f64], coeffs: &[f64]) -> Result<Vec<f64>> {
        check_len("basis coefficients", self.rank, coeffs.len())?;
        check_len("basis offset", self.dim(), base.len())?;
        let m = self.dim();
        let mut out = base.to_vec();
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
            let start = ci * CHUNK;
            for (k, &c) in coeffs.iter().enumerate() {
                let row = &self.components[k * m + start..k * m + start + chunk.len()];
                for (o, &b) in chunk.iter_mut().zip(row) {
                    *o += c * b;
                }
            }
        });
        Ok(out)
    }

    /// `Bᵀ`-style projection: `c_k = B_k · (x − mean)`.
    pub fn project(&self, sample: &[f64]) -> Result<Vec<f64>> {
        check_len("projected sample", self.dim(), sample.len())?;
        let centered: Vec<f64> = sample.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((0..self.rank)
            .into_par_iter()
            .map(|k| dot(self.component(k), &centered))
            .collect())
    }

    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.synthesize(coeffs)
    }

    /// Keeps the first `k` components.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k > self.rank {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate rank {} basis to {k}",
                self.rank
            )));
        }
        Self::new(
            self.mean.clone(),
            self.components[..k * self.dim()].to_vec(),
            self.stddev.as_ref().map(|s| s[..k].to_vec()),
        )
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis() -> LinearBasis {
        let s = 0.5f64.sqrt();
        LinearBasis::new(
            vec![1.0, 2.0, 3.0],
            vec![s, s, 0.0, 0.0, 0.0, 1.0],
            Some(vec![2.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn project_mean_is_zero() {
        let b = basis();
        assert_eq!(b.project(b.mean()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn in_span_round_trip() {
        let b = basis();
        let x = b.synthesize(&[0.3, -1.2]).unwrap();
        let c = b.project(&x).unwrap();
        assert!((c[0] - 0.3).abs() < 1e-12 && (c[1] + 1.2).abs() < 1e-12);
        let y = b.reconstruct(&c).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_span_residual_is_orthogonal() {
        let b = basis();
        let x = vec![4.0, -1.0, 0.5];
        let y = b.reconstruct(&b.project(&x).unwrap()).unwrap();
        let r: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        for k in 0..b.rank() {
            assert!(dot(&r, b.component(k)).abs() < 1e-8);
        }
    }

    #[test]
    fn length_mismatch_errors() {
        let b = basis();
        assert!(b.synthesize(&[1.0]).is_err());
        assert!(b.project(&[1.0, 2.0]).is_err());
    }
}

//! Basis construction: PCA plus procedural stand-ins for captured scans.

mod pca;
mod procedural;
mod scans;

pub use pca::{pca_fit, pca_fit_samples, PcaReport};
pub use procedural::{
    build_bundle_models, build_detail_model, build_morphable_model, skinning_for_patch,
    BuildConfig, BuildReport, ExpressionPrimitive, EXPRESSION_PRIMITIVES,
};
pub use scans::{generate_scans, ScanConfig};

#[cfg(test)]
pub(crate) use procedural::tests::small_config as procedural_test_config;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleKind {
    Shape,
    Expression,
    Albedo,
    StaticDisplacement,
    Compressed,
    Stretched,
}

impl SampleKind {
    pub const ALL: [SampleKind; 6] = [
        SampleKind::Shape,
        SampleKind::Expression,
        SampleKind::Albedo,
        SampleKind::StaticDisplacement,
        SampleKind::Compressed,
        SampleKind::Stretched,
    ];

    pub(crate) fn stream(self) -> u64 {
        match self {
            SampleKind::Shape => 1,
            SampleKind::Expression => 2,
            SampleKind::Albedo => 3,
            SampleKind::StaticDisplacement => 4,
            SampleKind::Compressed => 5,
            SampleKind::Stretched => 6,
        }
    }
}

/// Equal-length flat samples of one kind.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    kind: SampleKind,
    samples: Vec<Vec<f64>>,
    seed: u64,
    /// Per-sample age parameter in [0, 1] for static displacement sets.
    ages: Option<Vec<f64>>,
}

impl SampleSet {
    pub fn new(kind: SampleKind, samples: Vec<Vec<f64>>, seed: u64, ages: Option<Vec<f64>>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} set needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let m = samples[0].len();
        if samples.iter().any(|s| s.len() != m) {
            return Err(Error::InvalidArgument(format!("{kind:?} samples differ in length")));
        }
        if let Some(a) = &ages {
            crate::error::check_len("ages", samples.len(), a.len())?;
        }
        Ok(Self {
            kind,
            samples,
            seed,
            ages,
        })
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ages(&self) -> Option<&[f64]> {
        self.ages.as_deref()
    }
}

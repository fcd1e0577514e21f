//! Builds the bundled procedural morphable and detail models.

use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use super::{generate_scans, pca_fit, PcaReport, SampleKind, ScanConfig};
use crate::detail::{DetailModel, NetworkShape};
use crate::error::{Error, Result};
use crate::linear::LinearBasis;
use crate::mesh::patch::{EYE_CENTERS, EYE_RADIUS};
use crate::mesh::{face_patch, Topology, Vec3};
use crate::morphable::{ModelDims, MorphableModel, SkinningData, JOINT_NAMES};

/// A Gaussian-windowed displacement in a fixed direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpressionPrimitive {
    pub name: &'static str,
    pub center: (f64, f64),
    pub radius: (f64, f64),
    pub direction: [f64; 3],
}

impl ExpressionPrimitive {
    /// Offset of a surface point at planar position (x, y), unit peak.
    pub fn offset(&self, x: f64, y: f64) -> Vec3 {
        let g = (-0.5
            * (((x - self.center.0) / self.radius.0).powi(2)
                + ((y - self.center.1) / self.radius.1).powi(2)))
        .exp();
        Vec3::from(self.direction).normalize() * g
    }
}

const fn prim(
    name: &'static str,
    center: (f64, f64),
    radius: (f64, f64),
    direction: [f64; 3],
) -> ExpressionPrimitive {
    ExpressionPrimitive {
        name,
        center,
        radius,
        direction,
    }
}

pub const EXPRESSION_PRIMITIVES: [ExpressionPrimitive; 24] = [
    prim("brow-raise-left", (-0.35, 0.5), (0.25, 0.12), [0.0, 1.0, 0.0]),
    prim("brow-raise-right", (0.35, 0.5), (0.25, 0.12), [0.0, 1.0, 0.0]),
    prim("brow-furrow-left", (-0.15, 0.45), (0.12, 0.1), [0.6, -0.5, 0.0]),
    prim("brow-furrow-right", (0.15, 0.45), (0.12, 0.1), [-0.6, -0.5, 0.0]),
    prim("forehead-lift", (0.0, 0.8), (0.5, 0.2), [0.0, 1.0, 0.1]),
    prim("squint-left", (-0.38, 0.3), (0.15, 0.06), [0.0, -1.0, 0.0]),
    prim("squint-right", (0.38, 0.3), (0.15, 0.06), [0.0, -1.0, 0.0]),
    prim("lower-lid-left", (-0.38, 0.12), (0.15, 0.05), [0.0, 1.0, 0.0]),
    prim("lower-lid-right", (0.38, 0.12), (0.15, 0.05), [0.0, 1.0, 0.0]),
    prim("cheek-raise-left", (-0.45, -0.15), (0.2, 0.18), [0.0, 0.7, 0.7]),
    prim("cheek-raise-right", (0.45, -0.15), (0.2, 0.18), [0.0, 0.7, 0.7]),
    prim("nose-wrinkle", (0.0, 0.1), (0.12, 0.12), [0.0, 0.8, -0.3]),
    prim("smile-left", (-0.4, -0.55), (0.15, 0.15), [-0.7, 0.7, 0.0]),
    prim("smile-right", (0.4, -0.55), (0.15, 0.15), [0.7, 0.7, 0.0]),
    prim("frown-left", (-0.4, -0.6), (0.15, 0.15), [0.0, -1.0, 0.0]),
    prim("frown-right", (0.4, -0.6), (0.15, 0.15), [0.0, -1.0, 0.0]),
    prim("jaw-open", (0.0, -0.9), (0.6, 0.3), [0.0, -1.0, -0.2]),
    prim("lower-lip-down", (0.0, -0.65), (0.25, 0.08), [0.0, -1.0, 0.1]),
    prim("upper-lip-up", (0.0, -0.42), (0.25, 0.08), [0.0, 1.0, 0.1]),
    prim("pucker", (0.0, -0.55), (0.3, 0.15), [0.0, 0.0, 1.0]),
    prim("lip-stretch-left", (-0.3, -0.55), (0.12, 0.1), [-1.0, 0.0, 0.0]),
    prim("lip-stretch-right", (0.3, -0.55), (0.12, 0.1), [1.0, 0.0, 0.0]),
    prim("mouth-shift", (0.0, -0.55), (0.35, 0.2), [-1.0, 0.0, 0.0]),
    prim("chin-raise", (0.0, -0.95), (0.3, 0.15), [0.0, 1.0, 0.3]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub seed: u64,
    /// Seed of the uniform(−0.1, 0.1) network weights.
    pub weight_seed: u64,
    pub dims: ModelDims,
    pub network: NetworkShape,
    pub scans: ScanConfig,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            weight_seed: 0,
            dims: ModelDims {
                identity: 40,
                expression: 20,
                albedo: 20,
                joints: JOINT_NAMES.len(),
                static_detail: 300,
                compressed: 26,
                stretched: 26,
            },
            network: NetworkShape::default(),
            scans: ScanConfig::default(),
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        self.scans.validate()?;
        if self.dims.joints != JOINT_NAMES.len() {
            return Err(Error::InvalidArgument(format!(
                "the procedural skeleton has {} joints, not {}",
                JOINT_NAMES.len(),
                self.dims.joints
            )));
        }
        let s = &self.scans;
        let checks = [
            ("identity", self.dims.identity, s.shape_count),
            ("expression", self.dims.expression, s.expression_count),
            ("albedo", self.dims.albedo, s.albedo_count),
            ("static", self.dims.static_detail, s.static_count),
            ("compressed", self.dims.compressed, s.dynamic_count),
            ("stretched", self.dims.stretched, s.dynamic_count),
        ];
        for (name, k, n) in checks {
            if k == 0 || k + 1 > n {
                return Err(Error::InvalidArgument(format!(
                    "{name} dimension {k} needs 1 <= k <= samples - 1 = {}",
                    n.saturating_sub(1)
                )));
            }
        }
        if self.network.adain_dim == 0 || self.network.mlp_hidden == 0 || self.network.age_hidden == 0 {
            return Err(Error::InvalidArgument("network widths must be positive".into()));
        }
        Ok(())
    }
}

/// PCA spectra of every fitted basis, keyed by sample kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub spectra: Vec<(SampleKind, usize, PcaReport)>,
}

impl BuildReport {
    pub fn get(&self, kind: SampleKind) -> Option<(usize, &PcaReport)> {
        self.spectra.iter().find(|(k, _, _)| *k == kind).map(|(_, c, r)| (*c, r))
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Eye influence radius around each eye center.
const EYE_INFLUENCE: f64 = 0.2;

/// Skinning weights on the mean patch plus the vertex sets averaged into
/// each joint (head, neck, left eye, right eye).
pub fn skinning_for_patch(topology: &Topology, mean: &[Vec3]) -> (Vec<f64>, Vec<Vec<usize>>) {
    let n = topology.vertex_count();
    let mut w = vec![0.0; JOINT_NAMES.len() * n];
    let mut eye_sets = [Vec::new(), Vec::new()];
    let mut neck_set = Vec::new();
    for (v, p) in mean.iter().enumerate() {
        let mut eye_total = 0.0;
        for (e, &(cx, cy)) in EYE_CENTERS.iter().enumerate() {
            let d = ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt();
            let we = if d < EYE_INFLUENCE {
                (1.0 - (d / EYE_INFLUENCE).powi(2)).powi(2)
            } else {
                0.0
            };
            w[(2 + e) * n + v] = we;
            eye_total += we;
            if d < EYE_RADIUS {
                eye_sets[e].push(v);
            }
        }
        let rest = 1.0 - eye_total;
        let neck = rest * smoothstep(-0.5, -1.2, p.y);
        w[n + v] = neck;
        w[v] = rest - neck;
        if p.y < -0.95 {
            neck_set.push(v);
        }
    }
    let head_set = (0..n).collect();
    let [left, right] = eye_sets;
    (w, vec![head_set, neck_set, left, right])
}

/// Regressor rows `Σ_v r_v B_id[:, v]` and bias `Σ_v r_v S̄(v)` for joints
/// defined as uniform averages of vertex sets.
fn joint_regressor(shape: &LinearBasis, sets: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>) {
    let k = shape.rank();
    let mut reg = vec![0.0; 3 * sets.len() * k];
    let mut bias = vec![0.0; 3 * sets.len()];
    for (j, set) in sets.iter().enumerate() {
        let wgt = 1.0 / set.len() as f64;
        for a in 0..3 {
            bias[3 * j + a] = set.iter().map(|&v| shape.mean()[3 * v + a]).sum::<f64>() * wgt;
            for c in 0..k {
                let comp = shape.component(c);
                reg[(3 * j + a) * k + c] = set.iter().map(|&v| comp[3 * v + a]).sum::<f64>() * wgt;
            }
        }
    }
    (reg, bias)
}

fn fit(
    config: &BuildConfig,
    kind: SampleKind,
    k: usize,
    report: &mut BuildReport,
) -> Result<LinearBasis> {
    let set = generate_scans(&config.scans, kind, config.seed)?;
    let (basis, spectrum) = pca_fit(&set, k)?;
    info!(
        "{kind:?}: {} samples, {k} components explain {:.4} of variance",
        set.len(),
        spectrum.explained(k)
    );
    report.spectra.push((kind, k, spectrum));
    Ok(basis)
}

pub fn build_morphable_model(config: &BuildConfig, report: &mut BuildReport) -> Result<MorphableModel> {
    config.validate()?;
    let patch = face_patch();
    let topology: Arc<Topology> = patch.topology().clone();
    let shape = fit(config, SampleKind::Shape, config.dims.identity, report)?;
    let expr = fit(config, SampleKind::Expression, config.dims.expression, report)?;
    // Only expression offsets matter; drop the sample mean.
    let expression = LinearBasis::new(
        vec![0.0; expr.dim()],
        expr.components().to_vec(),
        expr.stddev().map(<[f64]>::to_vec),
    )?;
    let albedo = fit(config, SampleKind::Albedo, config.dims.albedo, report)?;
    let mean: Vec<Vec3> = shape
        .mean()
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();
    let (weights, sets) = skinning_for_patch(&topology, &mean);
    let (regressor, bias) = joint_regressor(&shape, &sets);
    let skinning = SkinningData::new(
        JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        weights,
        regressor,
        bias,
        topology.vertex_count(),
        shape.rank(),
    )?;
    let r = config.scans.albedo_resolution;
    MorphableModel::new(topology, shape, expression, albedo, (r, r), skinning)
}

pub fn build_detail_model(config: &BuildConfig, report: &mut BuildReport) -> Result<DetailModel> {
    config.validate()?;
    let st = fit(config, SampleKind::StaticDisplacement, config.dims.static_detail, report)?;
    let com = fit(config, SampleKind::Compressed, config.dims.compressed, report)?;
    let str_ = fit(config, SampleKind::Stretched, config.dims.stretched, report)?;
    let r = config.scans.uv_resolution;
    DetailModel::with_seeded_networks(
        (r, r),
        st,
        com,
        str_,
        config.dims.expression,
        config.network,
        config.weight_seed,
    )
}

/// Both models of a bundle from one configuration.
pub fn build_bundle_models(config: &BuildConfig) -> Result<(MorphableModel, DetailModel, BuildReport)> {
    let mut report = BuildReport::default();
    let morph = build_morphable_model(config, &mut report)?;
    let detail = build_detail_model(config, &mut report)?;
    Ok((morph, detail, report))
}

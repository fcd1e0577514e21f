//! Linear face model: shape and albedo synthesis, joint regression and
//! linear blend skinning.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linear::LinearBasis;
use crate::mesh::{FieldKind, Mesh, Topology, UvField, Vec3};
use crate::rotation::rodrigues;

pub const JOINT_NAMES: [&str; 4] = ["head", "neck", "left_eye", "right_eye"];
pub const SH_COEFFS: usize = 9;

/// Per-vertex skinning weights plus an affine joint regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinningData {
    joint_names: Vec<String>,
    /// j × n_v, row k holds joint k's weight for every vertex.
    weights: Vec<f64>,
    /// 3j × |β| row-major.
    regressor: Vec<f64>,
    /// 3j joint positions of the mean shape.
    bias: Vec<f64>,
}

impl SkinningData {
    pub fn new(
        joint_names: Vec<String>,
        weights: Vec<f64>,
        regressor: Vec<f64>,
        bias: Vec<f64>,
        vertex_count: usize,
        identity_dim: usize,
    ) -> Result<Self> {
        let j = joint_names.len();
        check_len("skinning weights", j * vertex_count, weights.len())?;
        check_len("joint regressor", 3 * j * identity_dim, regressor.len())?;
        check_len("joint bias", 3 * j, bias.len())?;
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("negative or non-finite skinning weight".into()));
        }
        let data = Self {
            joint_names,
            weights,
            regressor,
            bias,
        };
        data.check_normalized(vertex_count)?;
        Ok(data)
    }

    fn check_normalized(&self, vertex_count: usize) -> Result<()> {
        for v in 0..vertex_count {
            let s: f64 = (0..self.joint_count()).map(|k| self.weight(k, v)).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "skinning weights of vertex {v} sum to {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    #[inline]
    pub fn weight(&self, joint: usize, vertex: usize) -> f64 {
        let n = self.weights.len() / self.joint_count();
        self.weights[joint * n + vertex]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn regressor(&self) -> &[f64] {
        &self.regressor
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

/// Per-joint axis-angle rotations and a root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub theta: Vec<[f64; 3]>,
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity(joints: usize) -> Self {
        Self {
            theta: vec![[0.0; 3]; joints],
            translation: [0.0; 3],
        }
    }

    pub fn rotation(&self, k: usize) -> Vector3<f64> {
        Vector3::from(self.theta[k])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }
}

/// Coefficient block sizes of one model bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub identity: usize,
    pub expression: usize,
    pub albedo: usize,
    pub joints: usize,
    #[serde(rename = "static")]
    pub static_detail: usize,
    pub compressed: usize,
    pub stretched: usize,
}

/// One subject's coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub beta: Vec<f64>,
    pub xi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub pose: Pose,
    pub phi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_com: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_str: Option<Vec<f64>>,
}

impl CoefficientSet {
    /// All-zero coefficients with an ambient-only unit light.
    pub fn zeros(dims: &ModelDims) -> Self {
        let mut gamma = vec![0.0; SH_COEFFS];
        gamma[0] = 1.0;
        Self {
            beta: vec![0.0; dims.identity],
            xi: vec![0.0; dims.expression],
            alpha: vec![0.0; dims.albedo],
            gamma,
            pose: Pose::identity(dims.joints),
            phi: vec![0.0; dims.static_detail],
            phi_com: None,
            phi_str: None,
        }
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        check_len("beta", dims.identity, self.beta.len())?;
        check_len("xi", dims.expression, self.xi.len())?;
        check_len("alpha", dims.albedo, self.alpha.len())?;
        check_len("gamma", SH_COEFFS, self.gamma.len())?;
        check_len("pose joints", dims.joints, self.pose.theta.len())?;
        check_len("phi", dims.static_detail, self.phi.len())?;
        if let Some(c) = &self.phi_com {
            check_len("phi_com", dims.compressed, c.len())?;
        }
        if let Some(s) = &self.phi_str {
            check_len("phi_str", dims.stretched, s.len())?;
        }
        let finite = self
            .beta
            .iter()
            .chain(&self.xi)
            .chain(&self.alpha)
            .chain(&self.gamma)
            .chain(self.pose.theta.iter().flatten())
            .chain(&self.pose.translation)
            .chain(&self.phi)
            .chain(self.phi_com.iter().flatten())
            .chain(self.phi_str.iter().flatten())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("coefficient set".into()));
        }
        Ok(())
    }
}

/// Mean shape and albedo with identity, expression and albedo bases.
#[derive(Debug, Clone)]
pub struct MorphableModel {
    topology: Arc<Topology>,
    shape: LinearBasis,
    expression: LinearBasis,
    albedo: LinearBasis,
    albedo_size: (usize, usize),
    skinning: SkinningData,
}

impl MorphableModel {
    /// `shape` carries S̄ and B_id; only the components of `expression` are
    /// used (its mean is ignored).
    pub fn new(
        topology: Arc<Topology>,
        shape: LinearBasis,
        expression: LinearBasis,
        albedo: LinearBasis,
        albedo_size: (usize, usize),
        skinning: SkinningData,
    ) -> Result<Self> {
        let m = topology.vertex_count() * 3;
        check_len("shape basis dimension", m, shape.dim())?;
        check_len("expression basis dimension", m, expression.dim())?;
        check_len(
            "albedo basis dimension",
            albedo_size.0 * albedo_size.1 * 3,
            albedo.dim(),
        )?;
        check_len(
            "skinning vertex weights",
            topology.vertex_count() * skinning.joint_count(),
            skinning.weights().len(),
        )?;
        check_len(
            "joint regressor",
            3 * skinning.joint_count() * shape.rank(),
            skinning.regressor().len(),
        )?;
        Ok(Self {
            topology,
            shape,
            expression,
            albedo,
            albedo_size,
            skinning,
        })
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn shape_basis(&self) -> &LinearBasis {
        &self.shape
    }

    pub fn expression_basis(&self) -> &LinearBasis {
        &self.expression
    }

    pub fn albedo_basis(&self) -> &LinearBasis {
        &self.albedo
    }

    pub fn albedo_size(&self) -> (usize, usize) {
        self.albedo_size
    }

    pub fn skinning(&self) -> &SkinningData {
        &self.skinning
    }

    pub fn identity_dim(&self) -> usize {
        self.shape.rank()
    }

    pub fn expression_dim(&self) -> usize {
        self.expression.rank()
    }

    pub fn albedo_dim(&self) -> usize {
        self.albedo.rank()
    }

    pub fn mean_mesh(&self) -> Mesh {
        Mesh::from_flat(self.topology.clone(), self.shape.mean()).expect("mean matches topology")
    }

    /// Returns `(S_neu, S)` with `S_neu = S̄ + βB_id` and `S = S_neu + ξB_exp`.
    pub fn synthesize_shape(&self, beta: &[f64], xi: &[f64]) -> Result<(Mesh, Mesh)> {
        check_len("beta", self.identity_dim(), beta.len())?;
        check_len("xi", self.expression_dim(), xi.len())?;
        let neutral = self.shape.synthesize(beta)?;
        let expressed = self.expression.synthesize_onto(&neutral, xi)?;
        Ok((
            Mesh::from_flat(self.topology.clone(), &neutral)?,
            Mesh::from_flat(self.topology.clone(), &expressed)?,
        ))
    }

    /// `Ā + αB_alb` clamped to [0, 1]; also returns how many entries were clamped.
    pub fn synthesize_albedo(&self, alpha: &[f64]) -> Result<(UvField, usize)> {
        let raw = self.synthesize_albedo_unclamped(alpha)?;
        let mut clamped = 0;
        let data: Vec<f64> = raw
            .into_data()
            .into_iter()
            .map(|x| {
                let c = x.clamp(0.0, 1.0);
                if c != x {
                    clamped += 1;
                }
                c
            })
            .collect();
        let (w, h) = self.albedo_size;
        Ok((UvField::from_data(w, h, 3, FieldKind::Albedo, data)?, clamped))
    }

    pub fn synthesize_albedo_unclamped(&self, alpha: &[f64]) -> Result<UvField> {
        check_len("alpha", self.albedo_dim(), alpha.len())?;
        let (w, h) = self.albedo_size;
        UvField::from_data(w, h, 3, FieldKind::Albedo, self.albedo.synthesize(alpha)?)
    }

    /// Bind-pose joint positions `𝒥(β)`.
    pub fn regress_joints(&self, beta: &[f64]) -> Result<Vec<Vec3>> {
        check_len("beta", self.identity_dim(), beta.len())?;
        let k = self.identity_dim();
        let reg = self.skinning.regressor();
        let bias = self.skinning.bias();
        Ok((0..self.skinning.joint_count())
            .map(|j| {
                let mut p = [0.0; 3];
                for (a, slot) in p.iter_mut().enumerate() {
                    let row = &reg[(3 * j + a) * k..(3 * j + a + 1) * k];
                    *slot = bias[3 * j + a] + crate::linear::dot(row, beta);
                }
                Vec3::from(p)
            })
            .collect())
    }

    /// Full chain: shape synthesis, joints and skinning.
    pub fn posed_shape(&self, coeffs: &CoefficientSet) -> Result<Mesh> {
        let (_, expressed) = self.synthesize_shape(&coeffs.beta, &coeffs.xi)?;
        let joints = self.regress_joints(&coeffs.beta)?;
        skin(&expressed, &coeffs.pose, &joints, &self.skinning)
    }
}

/// Linear blend skinning. Each vertex moves by
/// `Σ_k W[k,v] (R_k − I)(v − J_k) + t`, which equals
/// `Σ_k W[k,v] (R_k (v − J_k) + J_k) + t` for normalized weights and leaves
/// vertices untouched exactly when every rotation is zero.
pub fn skin(mesh: &Mesh, pose: &Pose, joints: &[Vec3], skinning: &SkinningData) -> Result<Mesh> {
    let j = skinning.joint_count();
    check_len("pose joints", j, pose.theta.len())?;
    check_len("joint positions", j, joints.len())?;
    let n = mesh.positions().len();
    check_len("skinning vertices", j * n, skinning.weights().len())?;
    skinning.check_normalized(n)?;
    let deltas: Vec<Option<Matrix3<f64>>> = (0..j)
        .map(|k| {
            let theta = pose.rotation(k);
            if theta.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("rotation of joint {k}")));
            }
            Ok((theta != Vector3::zeros()).then(|| rodrigues(&theta) - Matrix3::identity()))
        })
        .collect::<Result<_>>()?;
    let t = pose.translation();
    let positions = mesh
        .positions()
        .iter()
        .enumerate()
        .map(|(v, p)| {
            let mut out = *p;
            for (k, d) in deltas.iter().enumerate() {
                if let Some(d) = d {
                    let w = skinning.weight(k, v);
                    if w != 0.0 {
                        out += w * (d * (p - joints[k]));
                    }
                }
            }
            out + t
        })
        .collect();
    Mesh::new(mesh.topology().clone(), positions)
}

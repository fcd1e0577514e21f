//! Analysis-by-synthesis coefficient fitting.
//!
//! Minimizes the weighted total loss over selected coefficient blocks with
//! damped, reweighted Gauss–Newton steps and Armijo backtracking. Landmark
//! and regularization gradients and curvature are analytic; every other
//! term is differentiated by central finite differences on a seeded random
//! subset of coordinates per iteration and gets unit curvature.

use std::fmt::Write as _;
use std::str::FromStr;

use log::debug;
use nalgebra::{DMatrix, DVector, Matrix3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detail::DetailModel;
use crate::error::{check_len, Error, Result};
use crate::losses::{
    detail_loss, identity_loss, kd_loss, kl_coeff_loss, landmark_loss, photo_loss, total_loss, vertex_loss,
    DetailMaps, Embedder, L2Mode, Landmark, LossBreakdown, LossTerms, LossWeights,
};
use crate::mesh::{FieldKind, Mesh, PatchRegions, UvField, Vec3};
use crate::morphable::{CoefficientSet, MorphableModel, SH_COEFFS};
use crate::render::{project_landmarks, render_coefficients, Camera};
use crate::rotation::{rodrigues, rodrigues_jacobian};

/// Armijo sufficient-decrease constant.
const ARMIJO_C: f64 = 1e-4;
/// Floor on residual length in the reweighting, pixels.
const RESIDUAL_FLOOR: f64 = 1e-9;
/// Levenberg damping relative to the largest curvature entry.
const DAMPING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Beta,
    Xi,
    Alpha,
    Gamma,
    Pose,
    Phi,
}

impl Block {
    pub const ALL: [Block; 6] = [Block::Beta, Block::Xi, Block::Alpha, Block::Gamma, Block::Pose, Block::Phi];

    pub fn name(self) -> &'static str {
        match self {
            Block::Beta => "beta",
            Block::Xi => "xi",
            Block::Alpha => "alpha",
            Block::Gamma => "gamma",
            Block::Pose => "pose",
            Block::Phi => "phi",
        }
    }

    fn len(self, c: &CoefficientSet) -> usize {
        match self {
            Block::Beta => c.beta.len(),
            Block::Xi => c.xi.len(),
            Block::Alpha => c.alpha.len(),
            Block::Gamma => c.gamma.len(),
            Block::Pose => 3 * c.pose.theta.len() + 3,
            Block::Phi => c.phi.len(),
        }
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Block::ALL
            .into_iter()
            .find(|b| b.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown coefficient block `{s}`")))
    }
}

/// Parses a comma-separated block list such as `beta,xi`.
pub fn parse_blocks(s: &str) -> Result<Vec<Block>> {
    let mut out: Vec<Block> = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let b: Block = part.parse()?;
        if !out.contains(&b) {
            out.push(b);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("empty block list".into()));
    }
    Ok(out)
}

/// Offsets of the active blocks inside the packed parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    spans: Vec<(Block, usize, usize)>,
    len: usize,
}

impl Layout {
    fn new(blocks: &[Block], c: &CoefficientSet) -> Self {
        let mut spans = Vec::new();
        let mut off = 0;
        for &b in Block::ALL.iter().filter(|b| blocks.contains(b)) {
            let n = b.len(c);
            spans.push((b, off, n));
            off += n;
        }
        Self { spans, len: off }
    }

    fn span(&self, b: Block) -> Option<(usize, usize)> {
        self.spans.iter().find(|s| s.0 == b).map(|s| (s.1, s.2))
    }

    fn pack(&self, c: &CoefficientSet) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len);
        for &(b, _, _) in &self.spans {
            match b {
                Block::Beta => x.extend(&c.beta),
                Block::Xi => x.extend(&c.xi),
                Block::Alpha => x.extend(&c.alpha),
                Block::Gamma => x.extend(&c.gamma),
                Block::Pose => {
                    x.extend(c.pose.theta.iter().flatten());
                    x.extend(&c.pose.translation);
                }
                Block::Phi => x.extend(&c.phi),
            }
        }
        x
    }

    fn unpack(&self, x: &[f64], base: &CoefficientSet) -> CoefficientSet {
        let mut c = base.clone();
        for &(b, off, n) in &self.spans {
            let v = &x[off..off + n];
            match b {
                Block::Beta => c.beta.copy_from_slice(v),
                Block::Xi => c.xi.copy_from_slice(v),
                Block::Alpha => c.alpha.copy_from_slice(v),
                Block::Gamma => c.gamma.copy_from_slice(v),
                Block::Pose => {
                    let j = c.pose.theta.len();
                    for (k, t) in c.pose.theta.iter_mut().enumerate() {
                        t.copy_from_slice(&v[3 * k..3 * k + 3]);
                    }
                    c.pose.translation.copy_from_slice(&v[3 * j..3 * j + 3]);
                }
                Block::Phi => c.phi.copy_from_slice(v),
            }
        }
        c
    }
}

/// Observations to fit. Optional parts switch their loss terms on.
#[derive(Debug, Clone)]
pub struct FitTarget {
    pub camera: Camera,
    /// One per topology landmark, or empty.
    pub landmarks: Vec<Landmark>,
    pub image: Option<UvField>,
    /// Single-channel region-of-interest mask; all ones when absent.
    pub mask: Option<UvField>,
    pub truth_beta: Option<Vec<f64>>,
    /// Expressed coarse shape before posing.
    pub truth_vertices: Option<Mesh>,
    /// Static, compressed and stretched displacement maps.
    pub truth_detail: Option<[UvField; 3]>,
    pub teacher_age: Option<Vec<f64>>,
}

impl FitTarget {
    pub fn landmarks_only(camera: Camera, landmarks: Vec<Landmark>) -> Self {
        Self {
            camera,
            landmarks,
            image: None,
            mask: None,
            truth_beta: None,
            truth_vertices: None,
            truth_detail: None,
            teacher_age: None,
        }
    }

    fn has_terms(&self) -> bool {
        !self.landmarks.is_empty()
            || self.image.is_some()
            || self.truth_beta.is_some()
            || self.truth_vertices.is_some()
            || self.truth_detail.is_some()
            || self.teacher_age.is_some()
    }

    fn has_fd_terms(&self) -> bool {
        self.image.is_some()
            || self.truth_beta.is_some()
            || self.truth_vertices.is_some()
            || self.truth_detail.is_some()
            || self.teacher_age.is_some()
    }

    pub fn validate(&self, model: &MorphableModel, detail: Option<&DetailModel>) -> Result<()> {
        if !self.has_terms() {
            return Err(Error::InvalidArgument("fit target has no terms".into()));
        }
        if !self.landmarks.is_empty() {
            check_len("target landmarks", model.topology().landmarks().len(), self.landmarks.len())?;
            if let Some(l) = self.landmarks.iter().find(|l| !(l.sigma > 0.0)) {
                return Err(Error::InvalidArgument(format!("landmark sigma {} <= 0", l.sigma)));
            }
        }
        if let Some(img) = &self.image {
            if img.width() != self.camera.width || img.height() != self.camera.height || img.channels() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "target image {}x{}x{} does not match the {}x{} camera",
                    img.width(),
                    img.height(),
                    img.channels(),
                    self.camera.width,
                    self.camera.height
                )));
            }
        }
        if let Some(m) = &self.mask {
            let img = self
                .image
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("mask given without image".into()))?;
            if m.channels() != 1 || m.width() != img.width() || m.height() != img.height() {
                return Err(Error::InvalidArgument("mask resolution differs from image".into()));
            }
        }
        if let Some(b) = &self.truth_beta {
            check_len("truth beta", model.identity_dim(), b.len())?;
        }
        if let Some(v) = &self.truth_vertices {
            check_len("truth vertices", model.topology().vertex_count(), v.positions().len())?;
        }
        if self.truth_detail.is_some() || self.teacher_age.is_some() {
            let d = detail.ok_or_else(|| Error::InvalidArgument("detail terms need a detail model".into()))?;
            if let Some(maps) = &self.truth_detail {
                let (w, h) = d.resolution();
                for m in maps {
                    if m.width() != w || m.height() != h || m.channels() != 1 {
                        return Err(Error::InvalidArgument("truth displacement resolution mismatch".into()));
                    }
                }
            }
        }
        if let Some(t) = &self.teacher_age {
            check_len("teacher age bins", crate::detail::AGE_BINS, t.len())?;
            let s: f64 = t.iter().sum();
            if t.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("teacher probabilities sum to {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub blocks: Vec<Block>,
    pub weights: LossWeights,
    pub l2: L2Mode,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub relative_tolerance: f64,
    pub initial_step: f64,
    pub max_step: f64,
    pub max_backtracks: usize,
    pub fd_step: f64,
    /// Coordinates probed by finite differences per iteration.
    pub fd_coordinates: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            blocks: vec![Block::Beta, Block::Xi, Block::Pose],
            weights: LossWeights::default(),
            l2: L2Mode::Norm,
            max_iterations: 200,
            gradient_tolerance: 1e-10,
            relative_tolerance: 1e-8,
            initial_step: 1.0,
            max_step: 1.0,
            max_backtracks: 40,
            fd_step: 1e-4,
            fd_coordinates: 16,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.blocks.is_empty() {
            return Err(Error::InvalidArgument("no coefficient blocks selected".into()));
        }
        let positive = [
            ("gradient_tolerance", self.gradient_tolerance),
            ("initial_step", self.initial_step),
            ("max_step", self.max_step),
            ("fd_step", self.fd_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} = {v}")));
            }
        }
        if !(self.relative_tolerance >= 0.0) || self.fd_coordinates == 0 {
            return Err(Error::InvalidArgument("invalid tolerance or probe count".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    GradientTolerance,
    RelativeDecrease,
    ZeroLoss,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub step: f64,
    pub grad_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub coefficients: CoefficientSet,
    pub initial: LossBreakdown,
    pub final_loss: LossBreakdown,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub stop: StopReason,
}

/// Loss trace as CSV with one row per line-search trial.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration,loss,step,grad_norm,accepted\n");
    for r in trace {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{}", r.iteration, r.loss, r.step, r.grad_norm, r.accepted as u8);
    }
    s
}

/// Targets generated from known coefficients: every landmark projected with
/// uncertainty `sigma`.
pub fn synthesize_landmarks(
    model: &MorphableModel,
    coeffs: &CoefficientSet,
    camera: &Camera,
    sigma: f64,
) -> Result<Vec<Landmark>> {
    let posed = model.posed_shape(coeffs)?;
    Ok(project_landmarks(&posed, camera)?
        .into_iter()
        .map(|mu| Landmark { mu, sigma })
        .collect())
}

/// Projected landmarks and their Jacobian (2 rows per landmark, one column
/// per packed parameter) for the landmark-relevant blocks.
struct LandmarkJacobian {
    projected: Vec<[f64; 2]>,
    /// Row-major `(2·n_lmk) × n_params`.
    jac: Vec<f64>,
    cols: usize,
}

fn landmark_jacobian(
    model: &MorphableModel,
    c: &CoefficientSet,
    camera: &Camera,
    layout: &Layout,
) -> Result<LandmarkJacobian> {
    let (_, expressed) = model.synthesize_shape(&c.beta, &c.xi)?;
    let joints = model.regress_joints(&c.beta)?;
    let skin = model.skinning();
    let nj = skin.joint_count();
    let rot: Vec<Matrix3<f64>> = (0..nj).map(|k| rodrigues(&c.pose.rotation(k))).collect();
    let m: Vec<Matrix3<f64>> = rot.iter().map(|r| r - Matrix3::identity()).collect();
    let drot: Vec<[Matrix3<f64>; 3]> = (0..nj).map(|k| rodrigues_jacobian(&c.pose.rotation(k))).collect();
    let t = c.pose.translation();
    let shape = model.shape_basis();
    let expr = model.expression_basis();
    let kid = model.identity_dim();
    let reg = skin.regressor();

    let beta = layout.span(Block::Beta);
    let xi = layout.span(Block::Xi);
    let pose = layout.span(Block::Pose);
    let cols = layout.len;
    let topo = model.topology();
    let nl = topo.landmarks().len();
    let mut jac = vec![0.0; 2 * nl * cols];
    let mut projected = Vec::with_capacity(nl);
    let s = camera.scale;

    for (i, anchor) in topo.landmarks().iter().enumerate() {
        let mut p3 = Vec3::zeros();
        let mut rows = vec![Vec3::zeros(); cols];
        for (v, w) in topo.anchor_terms(anchor) {
            if w == 0.0 {
                continue;
            }
            let pos = expressed.positions()[v];
            let mut a = Matrix3::identity();
            let mut posed = pos;
            for k in 0..nj {
                let wk = skin.weight(k, v);
                if wk != 0.0 {
                    a += wk * m[k];
                    posed += wk * (m[k] * (pos - joints[k]));
                }
            }
            p3 += w * (posed + t);
            if let Some((off, n)) = beta {
                let comps = shape.components();
                for cix in 0..n {
                    let b = &comps[cix * shape.dim() + 3 * v..cix * shape.dim() + 3 * v + 3];
                    let mut col = a * Vec3::new(b[0], b[1], b[2]);
                    for k in 0..nj {
                        let wk = skin.weight(k, v);
                        if wk != 0.0 {
                            let dj = Vec3::new(
                                reg[(3 * k) * kid + cix],
                                reg[(3 * k + 1) * kid + cix],
                                reg[(3 * k + 2) * kid + cix],
                            );
                            col -= wk * (m[k] * dj);
                        }
                    }
                    rows[off + cix] += w * col;
                }
            }
            if let Some((off, n)) = xi {
                let comps = expr.components();
                for cix in 0..n {
                    let e = &comps[cix * expr.dim() + 3 * v..cix * expr.dim() + 3 * v + 3];
                    rows[off + cix] += w * (a * Vec3::new(e[0], e[1], e[2]));
                }
            }
            if let Some((off, _)) = pose {
                for k in 0..nj {
                    let wk = skin.weight(k, v);
                    if wk != 0.0 {
                        let u = pos - joints[k];
                        for ax in 0..3 {
                            rows[off + 3 * k + ax] += (w * wk) * (drot[k][ax] * u);
                        }
                    }
                }
                for ax in 0..3 {
                    rows[off + 3 * nj + ax][ax] += w;
                }
            }
        }
        let q = camera.project_point(&p3);
        projected.push([q[0], q[1]]);
        for (j, r) in rows.iter().enumerate() {
            jac[(2 * i) * cols + j] = s * r.x;
            jac[(2 * i + 1) * cols + j] = -s * r.y;
        }
    }
    Ok(LandmarkJacobian { projected, jac, cols })
}

/// Unweighted landmark loss and its analytic gradient with respect to the
/// packed parameters of `blocks` (ordered beta, xi, alpha, gamma, pose, phi;
/// pose as four axis-angle triples then the translation).
pub fn landmark_loss_gradient(
    model: &MorphableModel,
    coeffs: &CoefficientSet,
    landmarks: &[Landmark],
    camera: &Camera,
    blocks: &[Block],
) -> Result<(f64, Vec<f64>)> {
    let layout = Layout::new(blocks, coeffs);
    let lj = landmark_jacobian(model, coeffs, camera, &layout)?;
    let loss = landmark_loss(landmarks, &lj.projected)?;
    let (g, _) = landmark_grad_and_curvature(&lj, landmarks);
    Ok((loss, g))
}

/// Evaluates a packed parameter vector for the landmark term of `blocks`.
pub fn pack_blocks(coeffs: &CoefficientSet, blocks: &[Block]) -> Vec<f64> {
    Layout::new(blocks, coeffs).pack(coeffs)
}

pub fn unpack_blocks(x: &[f64], base: &CoefficientSet, blocks: &[Block]) -> CoefficientSet {
    Layout::new(blocks, base).unpack(x, base)
}

/// Gradient of the unweighted landmark loss and the reweighted curvature
/// `Σ_i J_iᵀ J_i / (2σ_i² ‖d_i‖)`.
fn landmark_grad_and_curvature(lj: &LandmarkJacobian, landmarks: &[Landmark]) -> (Vec<f64>, DMatrix<f64>) {
    let cols = lj.cols;
    let n = landmarks.len();
    let mut g = vec![0.0; cols];
    let mut weighted = DMatrix::<f64>::zeros(2 * n, cols);
    for (i, (l, p)) in landmarks.iter().zip(&lj.projected).enumerate() {
        let d = [p[0] - l.mu[0], p[1] - l.mu[1]];
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let inv2s = 1.0 / (2.0 * l.sigma * l.sigma);
        let rx = &lj.jac[(2 * i) * cols..(2 * i + 1) * cols];
        let ry = &lj.jac[(2 * i + 1) * cols..(2 * i + 2) * cols];
        // Subgradient 0 at an exact match.
        if norm > 0.0 {
            let (gx, gy) = (d[0] / norm * inv2s, d[1] / norm * inv2s);
            for j in 0..cols {
                g[j] += gx * rx[j] + gy * ry[j];
            }
        }
        let w = (inv2s / norm.max(RESIDUAL_FLOOR)).sqrt();
        for j in 0..cols {
            weighted[(2 * i, j)] = w * rx[j];
            weighted[(2 * i + 1, j)] = w * ry[j];
        }
    }
    (g, weighted.tr_mul(&weighted))
}

/// Solves `(H + μ·max diag(H)·I) d = −g`; coordinates without curvature
/// fall back to unit curvature.
fn newton_direction(g: &[f64], h: &DMatrix<f64>) -> Vec<f64> {
    let n = g.len();
    let mut h = h.clone();
    let top = (0..n).map(|j| h[(j, j)]).fold(0.0, f64::max);
    for j in 0..n {
        if h[(j, j)] <= 0.0 {
            h[(j, j)] = 1.0;
        }
        h[(j, j)] += DAMPING * top.max(1.0);
    }
    let rhs = -DVector::from_column_slice(g);
    match h.clone().cholesky() {
        Some(ch) => ch.solve(&rhs).iter().copied().collect(),
        None => (0..n).map(|j| rhs[j] / h[(j, j)]).collect(),
    }
}

/// Everything needed to evaluate the objective.
pub struct FitModels<'a> {
    pub morphable: &'a MorphableModel,
    pub detail: Option<&'a DetailModel>,
    pub embedder: &'a dyn Embedder,
}

struct Problem<'a> {
    models: FitModels<'a>,
    target: &'a FitTarget,
    options: &'a FitOptions,
    vertex_mask: Vec<f64>,
    detail_mask: Option<UvField>,
    image_mask: Option<UvField>,
    target_embedding: Option<Vec<f64>>,
}

impl<'a> Problem<'a> {
    fn new(models: FitModels<'a>, target: &'a FitTarget, options: &'a FitOptions) -> Result<Self> {
        let topo = models.morphable.topology();
        let vertex_mask = topo
            .region_weights(PatchRegions::FRONTAL_FACE)
            .unwrap_or_else(|| vec![1.0; topo.vertex_count()]);
        let detail_mask = match (&target.truth_detail, models.detail) {
            (Some(_), Some(d)) => {
                let (w, h) = d.resolution();
                Some(if topo.region(PatchRegions::DETAIL_FACE).is_some() {
                    topo.uv_mask(PatchRegions::DETAIL_FACE, w, h)?
                } else {
                    UvField::filled(w, h, 1, FieldKind::Mask, 1.0)
                })
            }
            _ => None,
        };
        let image_mask = target.image.as_ref().map(|img| {
            target
                .mask
                .clone()
                .unwrap_or_else(|| UvField::filled(img.width(), img.height(), 1, FieldKind::Mask, 1.0))
        });
        let target_embedding = match &target.image {
            Some(img) if options.weights.lambda_id > 0.0 => {
                Some(models.embedder.embed(img, image_mask.as_ref())?)
            }
            _ => None,
        };
        Ok(Self {
            models,
            target,
            options,
            vertex_mask,
            detail_mask,
            image_mask,
            target_embedding,
        })
    }

    /// Fills in derived dynamic coefficients when the detail term needs them.
    fn derive(&self, c: &CoefficientSet) -> Result<CoefficientSet> {
        let mut c = c.clone();
        if let (Some(_), Some(d)) = (&self.target.truth_detail, self.models.detail) {
            let (com, st) = d.dynamic_coefficients(&c.phi, &c.xi)?;
            c.phi_com = Some(com);
            c.phi_str = Some(st);
        }
        Ok(c)
    }

    /// Terms differentiated numerically, with their weighted sum.
    fn fd_terms(&self, c: &CoefficientSet) -> Result<LossTerms> {
        let t = self.target;
        let mode = self.options.l2;
        let mut terms = LossTerms::default();
        if let Some(img) = &t.image {
            let mask = self.image_mask.as_ref().expect("mask exists with image");
            let rendered = render_coefficients(self.models.morphable, c, &t.camera)?;
            terms.photo = Some(photo_loss(img, &rendered.image, mask, mode)?);
            if let Some(e) = &self.target_embedding {
                let r = self.models.embedder.embed(&rendered.image, Some(mask))?;
                terms.identity = Some(identity_loss(e, &r)?);
            }
        }
        if let Some(b) = &t.truth_beta {
            terms.kl = Some(kl_coeff_loss(&c.beta, b)?);
        }
        if let Some(v) = &t.truth_vertices {
            let (_, expressed) = self.models.morphable.synthesize_shape(&c.beta, &c.xi)?;
            terms.vertex = Some(vertex_loss(&expressed, v, &self.vertex_mask, mode)?);
        }
        if let Some(d) = self.models.detail {
            if let Some(maps) = &t.truth_detail {
                let com = c.phi_com.as_ref().expect("derived");
                let st = c.phi_str.as_ref().expect("derived");
                let sta = d.static_displacement(&c.phi)?;
                let (dc, ds) = d.polarized_displacements(com, st)?;
                terms.detail = Some(detail_loss(
                    DetailMaps {
                        static_map: &sta,
                        compressed: &dc,
                        stretched: &ds,
                    },
                    DetailMaps {
                        static_map: &maps[0],
                        compressed: &maps[1],
                        stretched: &maps[2],
                    },
                    self.detail_mask.as_ref().expect("mask built with detail target"),
                    mode,
                )?);
            }
            if let Some(teacher) = &t.teacher_age {
                terms.kd = Some(kd_loss(teacher, &d.age_probabilities(&c.phi)?)?);
            }
        }
        Ok(terms)
    }

    fn fd_objective(&self, c: &CoefficientSet) -> Result<f64> {
        let c = self.derive(c)?;
        let mut terms = self.fd_terms(&c)?;
        let sq = |v: &Option<Vec<f64>>| v.as_deref().map_or(0.0, |v| v.iter().map(|x| x * x).sum::<f64>());
        terms.reg = Some(sq(&c.phi_com) + sq(&c.phi_str));
        Ok(total_loss(&terms, &self.options.weights)?.total)
    }

    fn evaluate(&self, c: &CoefficientSet) -> Result<LossBreakdown> {
        let c = self.derive(c)?;
        let mut terms = self.fd_terms(&c)?;
        if !self.target.landmarks.is_empty() {
            let posed = self.models.morphable.posed_shape(&c)?;
            let projected = project_landmarks(&posed, &self.target.camera)?;
            terms.landmark = Some(landmark_loss(&self.target.landmarks, &projected)?);
        }
        terms.reg = Some(crate::losses::reg_loss(&c));
        total_loss(&terms, &self.options.weights)
    }

    /// Analytic gradient and curvature of the landmark and static
    /// regularization terms.
    fn analytic(&self, c: &CoefficientSet, layout: &Layout) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let w = &self.options.weights;
        let mut g = vec![0.0; layout.len];
        let mut h = DMatrix::<f64>::zeros(layout.len, layout.len);
        if !self.target.landmarks.is_empty() {
            let lj = landmark_jacobian(self.models.morphable, c, &self.target.camera, layout)?;
            let (gl, hl) = landmark_grad_and_curvature(&lj, &self.target.landmarks);
            let scale = w.lambda_self * w.lambda_lmk;
            for j in 0..layout.len {
                g[j] += scale * gl[j];
            }
            h += scale * hl;
        }
        if w.lambda_reg > 0.0 {
            let x = layout.pack(c);
            for &(b, off, n) in &layout.spans {
                if matches!(b, Block::Alpha | Block::Beta | Block::Xi | Block::Phi) {
                    for j in off..off + n {
                        g[j] += 2.0 * w.lambda_reg * x[j];
                        h[(j, j)] += 2.0 * w.lambda_reg;
                    }
                }
            }
        }
        Ok((g, h))
    }

    fn fd_gradient(&self, x: &[f64], base: &CoefficientSet, layout: &Layout, coords: &[usize]) -> Result<Vec<f64>> {
        let hstep = self.options.fd_step;
        let probes: Vec<(usize, f64)> = coords
            .par_iter()
            .map(|&j| {
                let mut xp = x.to_vec();
                xp[j] += hstep;
                let mut xm = x.to_vec();
                xm[j] -= hstep;
                let fp = self.fd_objective(&layout.unpack(&xp, base))?;
                let fm = self.fd_objective(&layout.unpack(&xm, base))?;
                Ok((j, (fp - fm) / (2.0 * hstep)))
            })
            .collect::<Result<_>>()?;
        let mut g = vec![0.0; layout.len];
        for (j, d) in probes {
            g[j] = d;
        }
        Ok(g)
    }
}

/// Runs the optimizer from `init`. Blocks outside `options.blocks` are
/// returned bit-identical to `init`.
pub fn fit_coefficients(
    models: FitModels<'_>,
    target: &FitTarget,
    init: &CoefficientSet,
    options: &FitOptions,
) -> Result<FitResult> {
    options.validate()?;
    target.validate(models.morphable, models.detail)?;
    check_len("gamma", SH_COEFFS, init.gamma.len())?;
    let problem = Problem::new(models, target, options)?;
    let layout = Layout::new(&options.blocks, init);
    let mut x = layout.pack(init);
    let initial = problem.evaluate(init)?;
    if !initial.total.is_finite() {
        return Err(Error::NonFinite("initial loss".into()));
    }
    let mut f = initial.total;
    let mut trace = vec![TraceRow {
        iteration: 0,
        loss: f,
        step: 0.0,
        grad_norm: f64::NAN,
        accepted: true,
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut step = options.initial_step;
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    let fd = target.has_fd_terms();

    for it in 1..=options.max_iterations {
        if f == 0.0 {
            stop = StopReason::ZeroLoss;
            break;
        }
        let current = layout.unpack(&x, init);
        let (ga, curvature) = problem.analytic(&current, &layout)?;
        let mut subsets: Vec<Vec<usize>> = Vec::new();
        if fd {
            let n = layout.len;
            if options.fd_coordinates < n {
                let mut pick = sample(&mut rng, n, options.fd_coordinates).into_vec();
                pick.sort_unstable();
                subsets.push(pick);
            }
            subsets.push((0..n).collect());
        } else {
            subsets.push(Vec::new());
        }
        let mut accepted = None;
        let mut last_norm = 0.0;
        for coords in &subsets {
            let gf = if coords.is_empty() {
                vec![0.0; layout.len]
            } else {
                problem.fd_gradient(&x, init, &layout, coords)?
            };
            let g: Vec<f64> = ga.iter().zip(&gf).map(|(a, b)| a + b).collect();
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            last_norm = gnorm;
            if gnorm < options.gradient_tolerance {
                break;
            }
            let dir = newton_direction(&g, &curvature);
            let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let mut alpha = step;
            for _ in 0..=options.max_backtracks {
                let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + alpha * d).collect();
                let fn_ = match problem.evaluate(&layout.unpack(&xn, init)) {
                    Ok(b) => b.total,
                    Err(e) if e.is_numerical() => f64::INFINITY,
                    Err(e) => return Err(e),
                };
                let ok = fn_.is_finite() && fn_ <= f + ARMIJO_C * alpha * slope;
                trace.push(TraceRow {
                    iteration: it,
                    loss: fn_,
                    step: alpha,
                    grad_norm: gnorm,
                    accepted: ok,
                });
                if ok {
                    accepted = Some((xn, fn_, alpha));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        iterations = it;
        if last_norm < options.gradient_tolerance {
            stop = StopReason::GradientTolerance;
            break;
        }
        let Some((xn, fn_, alpha)) = accepted else {
            stop = StopReason::LineSearchFailed;
            break;
        };
        let rel = (f - fn_) / f.abs().max(f64::MIN_POSITIVE);
        debug!("iteration {it}: loss {fn_:e}, step {alpha:e}, relative decrease {rel:e}");
        x = xn;
        f = fn_;
        step = (alpha * 2.0).min(options.max_step);
        if f == 0.0 {
            stop = StopReason::ZeroLoss;
            break;
        }
        if rel < options.relative_tolerance {
            stop = StopReason::RelativeDecrease;
            break;
        }
    }
    let mut coefficients = layout.unpack(&x, init);
    let final_loss = problem.evaluate(&coefficients)?;
    if target.truth_detail.is_some() {
        coefficients = problem.derive(&coefficients)?;
    }
    Ok(FitResult {
        coefficients,
        initial,
        final_loss,
        trace,
        iterations,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_morphable_model, BuildConfig, BuildReport};
    use crate::losses::PooledEmbedder;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn model() -> (MorphableModel, BuildConfig) {
        let cfg = crate::basis::procedural_test_config();
        let mut r = BuildReport::default();
        (build_morphable_model(&cfg, &mut r).unwrap(), cfg)
    }

    fn random_coeffs(cfg: &BuildConfig, rng: &mut ChaCha8Rng, scale: f64) -> CoefficientSet {
        let mut c = CoefficientSet::zeros(&cfg.dims);
        let mut n = || scale * rng.sample::<f64, _>(StandardNormal);
        c.beta.iter_mut().for_each(|x| *x = n());
        c.xi.iter_mut().for_each(|x| *x = n());
        for t in c.pose.theta.iter_mut() {
            for a in t.iter_mut() {
                *a = 0.2 * n();
            }
        }
        c.pose.translation = [0.1 * n(), 0.1 * n(), 0.0];
        c
    }

    fn camera() -> Camera {
        Camera::framing_patch(128, 128).unwrap()
    }

    #[test]
    fn blocks_parse() {
        assert_eq!(parse_blocks("beta, xi,beta").unwrap(), vec![Block::Beta, Block::Xi]);
        assert!(parse_blocks("beta,nose").is_err());
        assert!(parse_blocks("").is_err());
    }

    #[test]
    fn pack_round_trip() {
        let (_, cfg) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_coeffs(&cfg, &mut rng, 1.0);
        let x = pack_blocks(&c, &Block::ALL);
        assert_eq!(unpack_blocks(&x, &CoefficientSet::zeros(&cfg.dims), &Block::ALL), c);
    }

    #[test]
    fn landmark_gradient_matches_finite_differences() {
        let (m, cfg) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = random_coeffs(&cfg, &mut rng, 1.0);
        let lms = synthesize_landmarks(&m, &truth, &camera(), 1.0).unwrap();
        let blocks = [Block::Beta, Block::Xi, Block::Pose];
        for _ in 0..3 {
            let c = random_coeffs(&cfg, &mut rng, 1.0);
            let (_, g) = landmark_loss_gradient(&m, &c, &lms, &camera(), &blocks).unwrap();
            let x = pack_blocks(&c, &blocks);
            let h = 1e-6;
            let mut fd = vec![0.0; x.len()];
            for j in 0..x.len() {
                let mut xp = x.clone();
                xp[j] += h;
                let mut xm = x.clone();
                xm[j] -= h;
                let f = |x: &[f64]| {
                    let c = unpack_blocks(x, &c, &blocks);
                    let p = project_landmarks(&m.posed_shape(&c).unwrap(), &camera()).unwrap();
                    landmark_loss(&lms, &p).unwrap()
                };
                fd[j] = (f(&xp) - f(&xm)) / (2.0 * h);
            }
            let err = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err / norm < 1e-5, "relative error {}", err / norm);
        }
    }

    #[test]
    fn ground_truth_init_stops_immediately() {
        let (m, cfg) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_coeffs(&cfg, &mut rng, 1.0);
        let lms = synthesize_landmarks(&m, &truth, &camera(), 1.0).unwrap();
        let target = FitTarget::landmarks_only(camera(), lms);
        let mut options = FitOptions::default();
        options.weights.lambda_reg = 0.0;
        let emb = PooledEmbedder::default();
        let r = fit_coefficients(
            FitModels {
                morphable: &m,
                detail: None,
                embedder: &emb,
            },
            &target,
            &truth,
            &options,
        )
        .unwrap();
        assert!(r.iterations <= 2);
        assert!(r.final_loss.total <= 1e-9);
    }

    #[test]
    fn landmark_fit_recovers_perturbed_coefficients() {
        let (m, cfg) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = random_coeffs(&cfg, &mut rng, 1.0);
        let lms = synthesize_landmarks(&m, &truth, &camera(), 1.0).unwrap();
        let mut init = truth.clone();
        let mut n = || 0.1 * rng.sample::<f64, _>(StandardNormal);
        init.beta.iter_mut().for_each(|x| *x += n());
        init.xi.iter_mut().for_each(|x| *x += n());
        init.pose.theta.iter_mut().flatten().for_each(|x| *x += n());
        init.pose.translation[0] += n();
        init.pose.translation[1] += n();
        let target = FitTarget::landmarks_only(camera(), lms);
        let mut options = FitOptions {
            max_iterations: 500,
            ..FitOptions::default()
        };
        options.weights.lambda_reg = 0.0;
        let emb = PooledEmbedder::default();
        let r = fit_coefficients(
            FitModels {
                morphable: &m,
                detail: None,
                embedder: &emb,
            },
            &target,
            &init,
            &options,
        )
        .unwrap();
        let accepted: Vec<f64> = r.trace.iter().filter(|t| t.accepted).map(|t| t.loss).collect();
        assert!(accepted.windows(2).all(|w| w[1] <= w[0]));
        let ratio = r.final_loss.total / r.initial.total;
        assert!(ratio < 1e-3, "ratio {ratio}, stop {:?}, iterations {}", r.stop, r.iterations);
    }

    #[test]
    fn frozen_blocks_are_untouched() {
        let (m, cfg) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = random_coeffs(&cfg, &mut rng, 1.0);
        let lms = synthesize_landmarks(&m, &truth, &camera(), 1.0).unwrap();
        let init = random_coeffs(&cfg, &mut rng, 1.0);
        let target = FitTarget::landmarks_only(camera(), lms);
        let options = FitOptions {
            blocks: vec![Block::Beta, Block::Xi],
            max_iterations: 5,
            ..FitOptions::default()
        };
        let emb = PooledEmbedder::default();
        let r = fit_coefficients(
            FitModels {
                morphable: &m,
                detail: None,
                embedder: &emb,
            },
            &target,
            &init,
            &options,
        )
        .unwrap();
        assert_eq!(r.coefficients.pose, init.pose);
        assert_eq!(r.coefficients.alpha, init.alpha);
        assert_eq!(r.coefficients.gamma, init.gamma);
        assert_eq!(r.coefficients.phi, init.phi);
        assert_ne!(r.coefficients.beta, init.beta);
    }

    #[test]
    fn photo_fit_decreases_loss() {
        let (m, cfg) = model();
        let mut truth = CoefficientSet::zeros(&cfg.dims);
        truth.gamma = vec![1.2, 0.1, 0.3, -0.1, 0.0, 0.0, 0.05, 0.0, 0.0];
        let cam = Camera::framing_patch(48, 48).unwrap();
        let image = render_coefficients(&m, &truth, &cam).unwrap().image;
        let target = FitTarget {
            image: Some(image),
            ..FitTarget::landmarks_only(cam, Vec::new())
        };
        let mut init = truth.clone();
        init.gamma[0] = 0.9;
        init.gamma[2] = 0.0;
        let options = FitOptions {
            blocks: vec![Block::Gamma],
            max_iterations: 10,
            ..FitOptions::default()
        };
        let emb = PooledEmbedder::default();
        let r = fit_coefficients(
            FitModels {
                morphable: &m,
                detail: None,
                embedder: &emb,
            },
            &target,
            &init,
            &options,
        )
        .unwrap();
        assert!(r.final_loss.total < 0.5 * r.initial.total);
        assert_eq!(r.coefficients.beta, init.beta);
    }

    #[test]
    fn target_without_terms_is_rejected() {
        let (m, cfg) = model();
        let emb = PooledEmbedder::default();
        let target = FitTarget::landmarks_only(camera(), Vec::new());
        let err = fit_coefficients(
            FitModels {
                morphable: &m,
                detail: None,
                embedder: &emb,
            },
            &target,
            &CoefficientSet::zeros(&cfg.dims),
            &FitOptions::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let rows = vec![TraceRow {
            iteration: 1,
            loss: 0.5,
            step: 1.0,
            grad_norm: 2.0,
            accepted: true,
        }];
        let csv = trace_csv(&rows);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("iteration,loss"));
    }
}

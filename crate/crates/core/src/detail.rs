//! Static/dynamic displacement detail.
//!
//! The final displacement is the sum of a person-specific static map and an
//! expression-driven dynamic map. The dynamic map blends a compressed and a
//! stretched displacement by per-texel vertex tension, and the coefficients
//! of both polarized maps come from the static coefficients re-normalized
//! with statistics of the (affinely mapped) expression coefficients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linear::LinearBasis;
use crate::mesh::{FieldKind, Mesh, Topology, UvField};
use crate::morphable::{CoefficientSet, MorphableModel};
use crate::nn::{softmax, Dense, Mlp};

/// Minimum spread of the static coefficients accepted by the normalization.
pub const SIGMA_EPS: f64 = 1e-8;
pub const AGE_BINS: usize = 9;
pub const DEFAULT_MLP_HIDDEN: usize = 128;
pub const DEFAULT_ADAIN_DIM: usize = 64;
pub const DEFAULT_AGE_HIDDEN: usize = 64;

/// Where the expression mean enters the re-normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdainForm {
    /// `σ(ξ̃) · (φ̂ + μ(ξ̃))`.
    #[default]
    Printed,
    /// `σ(ξ̃) · φ̂ + μ(ξ̃)`.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetailOptions {
    pub adain_form: AdainForm,
    /// Upper bound applied to both tension halves; `None` leaves them unbounded.
    pub tension_clamp: Option<f64>,
}

impl Default for DetailOptions {
    fn default() -> Self {
        Self {
            adain_form: AdainForm::Printed,
            tension_clamp: Some(1.0),
        }
    }
}

/// Displacement bases plus the networks that drive the dynamic part.
#[derive(Debug, Clone)]
pub struct DetailModel {
    resolution: (usize, usize),
    static_basis: LinearBasis,
    compressed: LinearBasis,
    stretched: LinearBasis,
    adain: Dense,
    dynamic_mlp: Mlp,
    age_head: Mlp,
    options: DetailOptions,
}

/// Layer widths of the generated networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub adain_dim: usize,
    pub mlp_hidden: usize,
    pub age_hidden: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            adain_dim: DEFAULT_ADAIN_DIM,
            mlp_hidden: DEFAULT_MLP_HIDDEN,
            age_hidden: DEFAULT_AGE_HIDDEN,
        }
    }
}

impl DetailModel {
    pub fn new(
        resolution: (usize, usize),
        static_basis: LinearBasis,
        compressed: LinearBasis,
        stretched: LinearBasis,
        adain: Dense,
        dynamic_mlp: Mlp,
        age_head: Mlp,
    ) -> Result<Self> {
        let texels = resolution.0 * resolution.1;
        check_len("static basis dimension", texels, static_basis.dim())?;
        check_len("compressed basis dimension", texels, compressed.dim())?;
        check_len("stretched basis dimension", texels, stretched.dim())?;
        check_len("dynamic network input", static_basis.rank(), dynamic_mlp.input_dim())?;
        check_len(
            "dynamic network output",
            compressed.rank() + stretched.rank(),
            dynamic_mlp.output_dim(),
        )?;
        check_len("age head input", static_basis.rank(), age_head.input_dim())?;
        check_len("age head output", AGE_BINS, age_head.output_dim())?;
        Ok(Self {
            resolution,
            static_basis,
            compressed,
            stretched,
            adain,
            dynamic_mlp,
            age_head,
            options: DetailOptions::default(),
        })
    }

    /// Networks drawn from uniform(−0.1, 0.1) with a fixed seed, in the order
    /// affine map, dynamic network, age head.
    pub fn with_seeded_networks(
        resolution: (usize, usize),
        static_basis: LinearBasis,
        compressed: LinearBasis,
        stretched: LinearBasis,
        expression_dim: usize,
        shape: NetworkShape,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adain = Dense::seeded(expression_dim, shape.adain_dim, &mut rng);
        let k = static_basis.rank();
        let out = compressed.rank() + stretched.rank();
        let dynamic_mlp = Mlp::seeded(&[k, shape.mlp_hidden, shape.mlp_hidden, out], &mut rng);
        let age_head = Mlp::seeded(&[k, shape.age_hidden, shape.age_hidden, AGE_BINS], &mut rng);
        Self::new(resolution, static_basis, compressed, stretched, adain, dynamic_mlp, age_head)
    }

    pub fn with_options(mut self, options: DetailOptions) -> Self {
        self.options = options;
        self
    }

    pub fn options(&self) -> DetailOptions {
        self.options
    }

    pub fn set_options(&mut self, options: DetailOptions) {
        self.options = options;
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn static_basis(&self) -> &LinearBasis {
        &self.static_basis
    }

    pub fn compressed_basis(&self) -> &LinearBasis {
        &self.compressed
    }

    pub fn stretched_basis(&self) -> &LinearBasis {
        &self.stretched
    }

    pub fn adain(&self) -> &Dense {
        &self.adain
    }

    pub fn dynamic_mlp(&self) -> &Mlp {
        &self.dynamic_mlp
    }

    pub fn age_head(&self) -> &Mlp {
        &self.age_head
    }

    fn field(&self, data: Vec<f64>) -> Result<UvField> {
        let (w, h) = self.resolution;
        UvField::from_data(w, h, 1, FieldKind::Displacement, data)
    }

    /// `D_sta = D̄_sta + φ B_sta`.
    pub fn static_displacement(&self, phi: &[f64]) -> Result<UvField> {
        check_len("phi", self.static_basis.rank(), phi.len())?;
        self.field(self.static_basis.synthesize(phi)?)
    }

    /// `(D_com, D_str)` from their coefficient vectors.
    pub fn polarized_displacements(
        &self,
        phi_com: &[f64],
        phi_str: &[f64],
    ) -> Result<(UvField, UvField)> {
        check_len("phi_com", self.compressed.rank(), phi_com.len())?;
        check_len("phi_str", self.stretched.rank(), phi_str.len())?;
        Ok((
            self.field(self.compressed.synthesize(phi_com)?)?,
            self.field(self.stretched.synthesize(phi_str)?)?,
        ))
    }

    /// Input of the dynamic network: φ normalized by its own statistics and
    /// re-scaled by those of `ξ̃ = affine(ξ)`.
    pub fn modulated_input(&self, phi: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        check_len("phi", self.static_basis.rank(), phi.len())?;
        let (mu_phi, sigma_phi) = mean_std(phi);
        if !(sigma_phi > SIGMA_EPS) {
            return Err(Error::Degenerate(format!(
                "static coefficients have spread {sigma_phi:e} <= {SIGMA_EPS:e}"
            )));
        }
        let xi_t = self.adain.forward(xi)?;
        let (mu_xi, sigma_xi) = mean_std(&xi_t);
        Ok(phi
            .iter()
            .map(|&p| {
                let n = (p - mu_phi) / sigma_phi;
                match self.options.adain_form {
                    AdainForm::Printed => sigma_xi * (n + mu_xi),
                    AdainForm::Standard => sigma_xi * n + mu_xi,
                }
            })
            .collect())
    }

    /// `(φ_com, φ_str)` from static and expression coefficients.
    pub fn dynamic_coefficients(&self, phi: &[f64], xi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let input = self.modulated_input(phi, xi)?;
        let mut out = self.dynamic_mlp.forward(&input)?;
        let stretched = out.split_off(self.compressed.rank());
        Ok((out, stretched))
    }

    /// Age-bin probabilities predicted from static coefficients.
    pub fn age_probabilities(&self, phi: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.age_head.forward(phi)?))
    }
}

/// Population mean and standard deviation (divisor n).
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Per-vertex tension `1 − mean_k ‖e_k‖ / ‖e'_k‖` over incident edges.
/// Positive values mean compression, negative values stretch.
pub fn vertex_tension(deformed: &Mesh, neutral: &Mesh) -> Result<Vec<f64>> {
    if !Arc::ptr_eq(deformed.topology(), neutral.topology())
        && deformed.topology() != neutral.topology()
    {
        return Err(Error::InvalidArgument("tension needs a shared topology".into()));
    }
    let topo = neutral.topology();
    let s = deformed.positions();
    let s0 = neutral.positions();
    (0..topo.vertex_count())
        .map(|v| {
            let nbrs = topo.neighbors(v);
            let mut sum = 0.0;
            for &w in nbrs {
                let rest = (s0[v] - s0[w]).norm();
                if !(rest > 1e-12) {
                    return Err(Error::ZeroLengthEdge {
                        a: v.min(w),
                        b: v.max(w),
                    });
                }
                sum += (s[v] - s[w]).norm() / rest;
            }
            Ok(1.0 - sum / nbrs.len() as f64)
        })
        .collect()
}

/// Bakes per-vertex tension into UV space.
pub fn tension_uv_map(
    tension: &[f64],
    topology: &Topology,
    resolution: (usize, usize),
) -> Result<UvField> {
    let mut f = crate::raster::rasterize_uv(topology, tension, resolution.0, resolution.1)?;
    f.set_kind(FieldKind::Tension);
    Ok(f)
}

/// Split of the tension map into its compression and stretch halves.
pub fn split_tension(m: f64, clamp: Option<f64>) -> (f64, f64) {
    let pos = m.max(0.0);
    let neg = (-m).max(0.0);
    match clamp {
        Some(c) => (pos.min(c), neg.min(c)),
        None => (pos, neg),
    }
}

/// `D_dyn = M⁺ ⊙ D_com + M⁻ ⊙ D_str`.
pub fn interpolate_dynamic(
    tension_map: &UvField,
    compressed: &UvField,
    stretched: &UvField,
    clamp: Option<f64>,
) -> Result<UvField> {
    tension_map.check_shape(compressed, "compressed displacement")?;
    tension_map.check_shape(stretched, "stretched displacement")?;
    let data: Vec<f64> = tension_map
        .data()
        .par_iter()
        .zip(compressed.data().par_iter())
        .zip(stretched.data().par_iter())
        .map(|((&m, &c), &s)| {
            let (pos, neg) = split_tension(m, clamp);
            pos * c + neg * s
        })
        .collect();
    UvField::from_data(
        tension_map.width(),
        tension_map.height(),
        1,
        FieldKind::Displacement,
        data,
    )
}

/// `D = D_sta + D_dyn`, texel-wise.
pub fn compose_detail(static_map: &UvField, dynamic_map: &UvField) -> Result<UvField> {
    static_map.check_shape(dynamic_map, "dynamic displacement")?;
    let data = static_map
        .data()
        .iter()
        .zip(dynamic_map.data())
        .map(|(a, b)| a + b)
        .collect();
    UvField::from_data(
        static_map.width(),
        static_map.height(),
        static_map.channels(),
        FieldKind::Displacement,
        data,
    )
}

/// Moves each vertex along its stored normal by `scale · D(uv)`.
pub fn apply_displacement(mesh: &Mesh, displacement: &UvField, scale: f64) -> Result<Mesh> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("displacement scale {scale}")));
    }
    if displacement.channels() != 1 {
        return Err(Error::InvalidArgument("displacement must have one channel".into()));
    }
    let normals = mesh
        .normals()
        .ok_or_else(|| Error::InvalidArgument("mesh has no normals".into()))?;
    let uvs = mesh.topology().uvs();
    let positions = mesh
        .positions()
        .iter()
        .zip(normals)
        .zip(uvs)
        .map(|((p, n), uv)| {
            let d = displacement.sample_channel(uv[0], uv[1], 0)?;
            Ok(p + n * (scale * d))
        })
        .collect::<Result<Vec<_>>>()?;
    Mesh::new(mesh.topology().clone(), positions)
}

/// Every intermediate of one detail synthesis.
#[derive(Debug, Clone)]
pub struct DetailOutput {
    pub neutral: Mesh,
    /// Coarse expressed shape with the normals used for displacement.
    pub coarse: Mesh,
    pub tension: Vec<f64>,
    pub tension_map: UvField,
    pub static_map: UvField,
    /// `None` when the tension map is identically zero; the dynamic branch
    /// then contributes nothing and is not evaluated.
    pub dynamic_coeffs: Option<(Vec<f64>, Vec<f64>)>,
    pub dynamic_map: UvField,
    pub displacement: UvField,
    pub detailed: Mesh,
}

/// Runs the full detail chain for one coefficient set.
pub fn run_sd_detail(
    coeffs: &CoefficientSet,
    model: &MorphableModel,
    detail: &DetailModel,
) -> Result<DetailOutput> {
    let (neutral, expressed) = model.synthesize_shape(&coeffs.beta, &coeffs.xi)?;
    let tension = vertex_tension(&expressed, &neutral)?;
    let tension_map = tension_uv_map(&tension, model.topology(), detail.resolution())?;
    let static_map = detail.static_displacement(&coeffs.phi)?;
    let clamp = detail.options().tension_clamp;
    let (dynamic_coeffs, dynamic_map) = if tension_map.data().iter().all(|&m| m == 0.0) {
        let (w, h) = detail.resolution();
        (None, UvField::zeros(w, h, 1, FieldKind::Displacement))
    } else {
        let (com, str_) = detail.dynamic_coefficients(&coeffs.phi, &coeffs.xi)?;
        let (d_com, d_str) = detail.polarized_displacements(&com, &str_)?;
        let dynamic = interpolate_dynamic(&tension_map, &d_com, &d_str, clamp)?;
        (Some((com, str_)), dynamic)
    };
    let displacement = compose_detail(&static_map, &dynamic_map)?;
    let coarse = expressed.with_normals()?;
    let detailed = apply_displacement(&coarse, &displacement, 1.0)?;
    Ok(DetailOutput {
        neutral,
        coarse,
        tension,
        tension_map,
        static_map,
        dynamic_coeffs,
        dynamic_map,
        displacement,
        detailed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{face_patch, Vec3};
    use nalgebra::Rotation3;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn random_basis(rng: &mut ChaCha8Rng, k: usize, m: usize) -> LinearBasis {
        LinearBasis::new(
            (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            None,
        )
        .unwrap()
    }

    fn small_model(seed: u64) -> DetailModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (6, 5);
        let s = random_basis(&mut rng, 7, w * h);
        let c = random_basis(&mut rng, 3, w * h);
        let t = random_basis(&mut rng, 4, w * h);
        DetailModel::with_seeded_networks(
            (w, h),
            s,
            c,
            t,
            5,
            NetworkShape {
                adain_dim: 8,
                mlp_hidden: 16,
                age_hidden: 12,
            },
            0,
        )
        .unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn static_displacement_examples() {
        let model = small_model(1);
        let b = model.static_basis();
        let zero = model.static_displacement(&vec![0.0; 7]).unwrap();
        assert_eq!(zero.data(), b.mean());
        let mut e1 = vec![0.0; 7];
        e1[0] = 1.0;
        let one = model.static_displacement(&e1).unwrap();
        for i in 0..b.dim() {
            assert_eq!(one.data()[i], b.mean()[i] + b.component(0)[i]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phi = random_vec(&mut rng, 7);
        let got = model.static_displacement(&phi).unwrap();
        for i in 0..b.dim() {
            let mut acc = b.mean()[i];
            for (k, p) in phi.iter().enumerate() {
                acc += p * b.components()[k * b.dim() + i];
            }
            assert!((got.data()[i] - acc).abs() < 1e-9);
        }
        assert!(model.static_displacement(&[0.0; 3]).is_err());
    }

    #[test]
    fn polarized_displacement_examples() {
        let model = small_model(2);
        let (c, s) = model.polarized_displacements(&[0.0; 3], &[0.0; 4]).unwrap();
        assert_eq!(c.data(), model.compressed_basis().mean());
        assert_eq!(s.data(), model.stretched_basis().mean());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a1, a2) = (random_vec(&mut rng, 3), random_vec(&mut rng, 3));
        let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let z = vec![0.0; 4];
        let (f1, _) = model.polarized_displacements(&a1, &z).unwrap();
        let (f2, _) = model.polarized_displacements(&a2, &z).unwrap();
        let (fs, _) = model.polarized_displacements(&sum, &z).unwrap();
        let mean = model.compressed_basis().mean();
        for i in 0..mean.len() {
            let lin = (f1.data()[i] - mean[i]) + (f2.data()[i] - mean[i]);
            assert!((fs.data()[i] - mean[i] - lin).abs() < 1e-12);
        }
        let phi_s = random_vec(&mut rng, 4);
        let (_, st) = model.polarized_displacements(&a1, &phi_s).unwrap();
        let b = model.stretched_basis();
        for i in 0..b.dim() {
            let acc = b.mean()[i] + (0..4).map(|k| phi_s[k] * b.component(k)[i]).sum::<f64>();
            assert!((st.data()[i] - acc).abs() < 1e-9);
        }
        assert!(model.polarized_displacements(&[0.0; 2], &z).is_err());
    }

    #[test]
    fn identity_modulation_passes_phi_through() {
        let model = small_model(3);
        // Affine map with zero weights and bias (1, -1, 1, -1, ...) gives
        // statistics μ = 0, σ = 1 for any ξ.
        let bias: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let adain = Dense::new(5, 8, vec![0.0; 40], bias).unwrap();
        let model = DetailModel::new(
            model.resolution(),
            model.static_basis().clone(),
            model.compressed_basis().clone(),
            model.stretched_basis().clone(),
            adain,
            model.dynamic_mlp().clone(),
            model.age_head().clone(),
        )
        .unwrap();
        let phi = vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 0.0];
        let (mu, sigma) = mean_std(&phi);
        let phi: Vec<f64> = phi.iter().map(|p| (p - mu) / sigma).collect();
        let (c, s) = model.dynamic_coefficients(&phi, &[0.3; 5]).unwrap();
        let direct = model.dynamic_mlp().forward(&phi).unwrap();
        let joined: Vec<f64> = c.into_iter().chain(s).collect();
        for (a, b) in joined.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_shift_of_phi_is_ignored() {
        let model = small_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let phi = random_vec(&mut rng, 7);
        let xi = random_vec(&mut rng, 5);
        let shifted: Vec<f64> = phi.iter().map(|p| p + 0.75).collect();
        let a = model.dynamic_coefficients(&phi, &xi).unwrap();
        let b = model.dynamic_coefficients(&shifted, &xi).unwrap();
        for (x, y) in a.0.iter().chain(&a.1).zip(b.0.iter().chain(&b.1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    // Re-evaluates the modulation and network layer by layer from the raw
    // weight buffers.
    fn straight_line_dynamic(model: &DetailModel, phi: &[f64], xi: &[f64], printed: bool) -> Vec<f64> {
        let a = model.adain();
        let mut xt = vec![0.0; a.output];
        for o in 0..a.output {
            xt[o] = a.bias[o];
            for i in 0..a.input {
                xt[o] += a.weights[o * a.input + i] * xi[i];
            }
        }
        let n = phi.len() as f64;
        let mp = phi.iter().sum::<f64>() / n;
        let sp = (phi.iter().map(|p| (p - mp).powi(2)).sum::<f64>() / n).sqrt();
        let m = xt.len() as f64;
        let mx = xt.iter().sum::<f64>() / m;
        let sx = (xt.iter().map(|p| (p - mx).powi(2)).sum::<f64>() / m).sqrt();
        let mut h: Vec<f64> = phi
            .iter()
            .map(|p| {
                if printed {
                    sx * ((p - mp) / sp + mx)
                } else {
                    sx * ((p - mp) / sp) + mx
                }
            })
            .collect();
        let flat = model.dynamic_mlp().to_flat();
        let sizes = model.dynamic_mlp().sizes();
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (ni, no) = (w[0], w[1]);
            let weights = &flat[off..off + ni * no];
            let bias = &flat[off + ni * no..off + ni * no + no];
            off += ni * no + no;
            let mut next = vec![0.0; no];
            for o in 0..no {
                let mut acc = bias[o];
                for i in 0..ni {
                    acc += weights[o * ni + i] * h[i];
                }
                next[o] = if l + 2 < sizes.len() { acc.max(0.0) } else { acc };
            }
            h = next;
        }
        h
    }

    #[test]
    fn dynamic_coefficients_match_formula() {
        let model = small_model(0);
        let mut phi = vec![0.0; 7];
        phi[0] = 0.1;
        let xi = vec![0.0; 5];
        let (c, s) = model.dynamic_coefficients(&phi, &xi).unwrap();
        let oracle = straight_line_dynamic(&model, &phi, &xi, true);
        assert_eq!(c.len() + s.len(), oracle.len());
        for (a, b) in c.iter().chain(&s).zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let std_model = model.clone().with_options(DetailOptions {
            adain_form: AdainForm::Standard,
            tension_clamp: Some(1.0),
        });
        let (c2, s2) = std_model.dynamic_coefficients(&phi, &xi).unwrap();
        let oracle2 = straight_line_dynamic(&model, &phi, &xi, false);
        for (a, b) in c2.iter().chain(&s2).zip(&oracle2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_phi_errors() {
        let model = small_model(0);
        let err = model.dynamic_coefficients(&[0.5; 7], &[0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    fn scaled(mesh: &Mesh, s: f64) -> Mesh {
        Mesh::new(
            mesh.topology().clone(),
            mesh.positions().iter().map(|p| p * s).collect(),
        )
        .unwrap()
    }

    #[test]
    fn tension_closed_forms() {
        let neutral = face_patch();
        assert!(vertex_tension(&neutral, &neutral).unwrap().iter().all(|&t| t == 0.0));
        for s in [0.5, 2.0] {
            let t = vertex_tension(&scaled(&neutral, s), &neutral).unwrap();
            assert!(t.iter().all(|&v| v == 1.0 - s), "scale {s}");
        }
    }

    #[test]
    fn tension_is_rigid_invariant() {
        let neutral = face_patch();
        let mut deformed = neutral.clone();
        for (i, p) in deformed.positions_mut().iter_mut().enumerate() {
            p.y *= 1.0 + 0.05 * ((i % 7) as f64 / 7.0);
        }
        let rot = Rotation3::from_euler_angles(0.2, 0.4, -0.3);
        let moved = Mesh::new(
            neutral.topology().clone(),
            deformed
                .positions()
                .iter()
                .map(|p| rot * p + Vec3::new(3.0, -1.0, 2.0))
                .collect(),
        )
        .unwrap();
        let a = vertex_tension(&deformed, &neutral).unwrap();
        let b = vertex_tension(&moved, &neutral).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_length_edge_is_named() {
        let mut neutral = face_patch();
        let p0 = neutral.positions()[0];
        neutral.positions_mut()[1] = p0;
        let err = vertex_tension(&neutral, &neutral).unwrap_err();
        assert!(matches!(err, Error::ZeroLengthEdge { a: 0, b: 1 }));
    }

    #[test]
    fn tension_map_examples() {
        let topo = face_patch().topology().clone();
        let n = topo.vertex_count();
        let zero = tension_uv_map(&vec![0.0; n], &topo, (16, 16)).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
        let ones = tension_uv_map(&vec![1.0; n], &topo, (16, 16)).unwrap();
        // The patch chart covers the whole unit square.
        assert!(ones.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));

        let single = Topology::new(
            vec![[0, 1, 2]],
            vec![[0.25, 0.25], [0.75, 0.25], [0.5, 1.0]],
            vec![],
            BTreeMap::new(),
        )
        .unwrap();
        let m = tension_uv_map(&[0.0, 0.0, 1.0], &single, (1, 1)).unwrap();
        assert!((m.get(0, 0, 0) - 1.0 / 3.0).abs() < 1e-12);
        let big = tension_uv_map(&[0.0, 0.0, 1.0], &single, (4, 4)).unwrap();
        assert_eq!(big.get(0, 0, 0), 0.0);
    }

    #[test]
    fn overlapping_chart_is_rejected() {
        let topo = Topology::new(
            vec![[0, 1, 2], [3, 4, 5]],
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.1, 0.1], [0.9, 0.1], [0.1, 0.9]],
            vec![],
            BTreeMap::new(),
        )
        .unwrap();
        let err = tension_uv_map(&[0.0; 6], &topo, (8, 8)).unwrap_err();
        assert!(matches!(err, Error::UvOverlap { .. }));
    }

    fn random_field(rng: &mut ChaCha8Rng, w: usize, h: usize) -> UvField {
        UvField::from_data(w, h, 1, FieldKind::Displacement, random_vec(rng, w * h)).unwrap()
    }

    #[test]
    fn interpolation_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let com = random_field(&mut rng, 4, 3);
        let st = random_field(&mut rng, 4, 3);
        let m0 = UvField::zeros(4, 3, 1, FieldKind::Tension);
        let d = interpolate_dynamic(&m0, &com, &st, Some(1.0)).unwrap();
        assert!(d.data().iter().all(|&x| x == 0.0));
        let plus = UvField::filled(4, 3, 1, FieldKind::Tension, 1.0);
        assert_eq!(interpolate_dynamic(&plus, &com, &st, Some(1.0)).unwrap().data(), com.data());
        let minus = UvField::filled(4, 3, 1, FieldKind::Tension, -1.0);
        assert_eq!(interpolate_dynamic(&minus, &com, &st, Some(1.0)).unwrap().data(), st.data());
        // Clamping bounds the weights; unclamped scales linearly.
        let big = UvField::filled(4, 3, 1, FieldKind::Tension, 3.0);
        assert_eq!(interpolate_dynamic(&big, &com, &st, Some(1.0)).unwrap().data(), com.data());
        let raw = interpolate_dynamic(&big, &com, &st, None).unwrap();
        for (a, b) in raw.data().iter().zip(com.data()) {
            assert_eq!(*a, 3.0 * b);
        }
        let wrong = UvField::zeros(3, 3, 1, FieldKind::Tension);
        assert!(interpolate_dynamic(&wrong, &com, &st, Some(1.0)).is_err());
    }

    #[test]
    fn tension_halves_have_disjoint_support() {
        for m in [-2.0, -1.0, -0.3, 0.0, 0.4, 1.0, 5.0] {
            for clamp in [Some(1.0), None] {
                let (p, n) = split_tension(m, clamp);
                assert!(p == 0.0 || n == 0.0);
            }
        }
    }

    #[test]
    fn composition_is_texelwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_field(&mut rng, 5, 4);
        let b = random_field(&mut rng, 5, 4);
        let z = UvField::zeros(5, 4, 1, FieldKind::Displacement);
        assert_eq!(compose_detail(&a, &z).unwrap().data(), a.data());
        assert_eq!(compose_detail(&z, &b).unwrap().data(), b.data());
        let ab = compose_detail(&a, &b).unwrap();
        let ba = compose_detail(&b, &a).unwrap();
        assert_eq!(ab.data(), ba.data());
        for i in 0..20 {
            assert_eq!(ab.data()[i], a.data()[i] + b.data()[i]);
        }
        assert!(compose_detail(&a, &UvField::zeros(4, 4, 1, FieldKind::Displacement)).is_err());
    }

    #[test]
    fn displacement_examples() {
        let quad = crate::mesh::tests::unit_quad(false).with_normals().unwrap();
        let zero = UvField::zeros(4, 4, 1, FieldKind::Displacement);
        assert_eq!(apply_displacement(&quad, &zero, 1.0).unwrap().positions(), quad.positions());
        let c = UvField::filled(4, 4, 1, FieldKind::Displacement, 0.25);
        let out = apply_displacement(&quad, &c, 1.0).unwrap();
        for (p, q) in quad.positions().iter().zip(out.positions()) {
            assert_eq!(*q, p + Vec3::new(0.0, 0.0, 0.25));
        }
        assert!(apply_displacement(&crate::mesh::tests::unit_quad(false), &c, 1.0).is_err());
        assert!(apply_displacement(&quad, &c, 0.0).is_err());
    }

    #[test]
    fn displacement_is_linear_along_fixed_normals() {
        let mesh = face_patch().with_normals().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d1 = random_field(&mut rng, 8, 8);
        let d2 = random_field(&mut rng, 8, 8);
        let normals = mesh.normals().unwrap().to_vec();
        let mut once = apply_displacement(&mesh, &d1, 0.01).unwrap();
        once.set_normals(normals).unwrap();
        let twice = apply_displacement(&once, &d2, 0.01).unwrap();
        let both = apply_displacement(&mesh, &compose_detail(&d1, &d2).unwrap(), 0.01).unwrap();
        for (p, q) in twice.positions().iter().zip(both.positions()) {
            assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn tension_needs_shared_topology() {
        let quad = crate::mesh::tests::unit_quad(false);
        assert!(vertex_tension(&face_patch(), &quad).is_err());
    }
}

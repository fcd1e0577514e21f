//! Spherical-harmonics shading, orthographic projection and image rendering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mesh::{FieldKind, Mesh, UvField, Vec3};
use crate::morphable::{CoefficientSet, MorphableModel, SH_COEFFS};
use crate::raster::{rasterize_uv_channels, visibility};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: f64 = 1.092_548_430_592_079_2;
pub const SH_C3: f64 = 0.315_391_565_252_520_05;
pub const SH_C4: f64 = 0.546_274_215_296_039_6;

/// Short description stored in bundle manifests.
pub const SH_CONVENTION: &str =
    "real SH bands 0-2: [c0, c1*y, c1*z, c1*x, c2*xy, c2*yz, c3*(3z^2-1), c2*xz, c4*(x^2-y^2)]";

/// Real SH basis without the unit-length check.
#[inline]
pub fn sh_basis_raw(n: &Vec3) -> [f64; SH_COEFFS] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// The nine band 0–2 real SH values of a unit normal.
pub fn sh_basis(n: &Vec3) -> Result<[f64; SH_COEFFS]> {
    let len = n.norm();
    if !((len - 1.0).abs() <= 1e-6) {
        return Err(Error::InvalidArgument(format!("normal has length {len}")));
    }
    Ok(sh_basis_raw(n))
}

/// `T = A ⊙ Σ_k γ_k Ψ_k(N)` per texel, unclamped.
pub fn shade(albedo: &UvField, normals: &UvField, gamma: &[f64]) -> Result<UvField> {
    check_len("gamma", SH_COEFFS, gamma.len())?;
    if normals.channels() != 3 {
        return Err(Error::InvalidArgument("normal field must have 3 channels".into()));
    }
    if albedo.width() != normals.width() || albedo.height() != normals.height() {
        return Err(Error::InvalidArgument(format!(
            "shading: albedo {}x{} vs normals {}x{}",
            albedo.width(),
            albedo.height(),
            normals.width(),
            normals.height()
        )));
    }
    let ch = albedo.channels();
    let mut out = vec![0.0; albedo.data().len()];
    out.par_chunks_mut(ch)
        .zip(albedo.data().par_chunks(ch))
        .zip(normals.data().par_chunks(3))
        .try_for_each(|((o, a), n)| {
            let psi = sh_basis(&Vec3::new(n[0], n[1], n[2]))?;
            let irradiance: f64 = psi.iter().zip(gamma).map(|(p, g)| p * g).sum();
            for (o, a) in o.iter_mut().zip(a) {
                *o = a * irradiance;
            }
            Ok::<_, Error>(())
        })?;
    UvField::from_data(albedo.width(), albedo.height(), ch, FieldKind::Image, out)
}

/// Orthographic camera mapping model units to pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub scale: f64,
    pub principal: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(scale: f64, principal: [f64; 2], width: usize, height: usize) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!("camera scale {scale}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("zero-resolution image".into()));
        }
        Ok(Self {
            scale,
            principal,
            width,
            height,
        })
    }

    /// Centered camera framing the procedural patch (±1.2 model units tall).
    pub fn framing_patch(width: usize, height: usize) -> Result<Self> {
        let scale = 0.4 * width.min(height) as f64;
        Self::new(scale, [width as f64 / 2.0, height as f64 / 2.0], width, height)
    }

    /// `(scale·x + cx, −scale·y + cy, z)`; larger depth is nearer.
    #[inline]
    pub fn project_point(&self, p: &Vec3) -> [f64; 3] {
        [
            self.scale * p.x + self.principal[0],
            -self.scale * p.y + self.principal[1],
            p.z,
        ]
    }
}

pub fn project(points: &[Vec3], camera: &Camera) -> Vec<[f64; 3]> {
    points.iter().map(|p| camera.project_point(p)).collect()
}

/// Pixel positions of the mesh's landmark anchors.
pub fn project_landmarks(mesh: &Mesh, camera: &Camera) -> Result<Vec<[f64; 2]>> {
    if mesh.topology().landmarks().is_empty() {
        return Err(Error::InvalidArgument("topology defines no landmarks".into()));
    }
    Ok(mesh
        .landmark_positions()
        .iter()
        .map(|p| {
            let q = camera.project_point(p);
            [q[0], q[1]]
        })
        .collect())
}

/// Per-vertex normals baked into UV space. Interpolated normals are
/// renormalized; uncovered texels hold +z.
pub fn bake_normals(mesh: &Mesh, width: usize, height: usize) -> Result<UvField> {
    let normals = mesh
        .normals()
        .ok_or_else(|| Error::InvalidArgument("mesh has no normals".into()))?;
    let flat: Vec<f64> = normals.iter().flat_map(|n| [n.x, n.y, n.z]).collect();
    let (mut field, covered) = rasterize_uv_channels(mesh.topology(), &flat, 3, width, height)?;
    for (n, &c) in field.data_mut().chunks_exact_mut(3).zip(&covered) {
        let v = Vec3::new(n[0], n[1], n[2]);
        let len = v.norm();
        let unit = if c && len > 1e-12 { v / len } else { Vec3::z() };
        n.copy_from_slice(unit.as_slice());
    }
    field.set_kind(FieldKind::Normal);
    Ok(field)
}

/// Rasterized image with its depth and coverage buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: UvField,
    /// Per-pixel depth; 0 where uncovered.
    pub depth: Vec<f64>,
    pub coverage: Vec<bool>,
    /// Visible triangle per pixel.
    pub triangle: Vec<Option<usize>>,
}

/// Z-buffered rendering of `mesh` textured with `texture` through its UVs.
pub fn rasterize(mesh: &Mesh, texture: &UvField, camera: &Camera) -> Result<RenderOutput> {
    let (w, h) = (camera.width, camera.height);
    let verts = project(mesh.positions(), camera);
    let topo = mesh.topology();
    let frags = visibility(w, h, &verts, topo.triangles())?;
    let ch = texture.channels();
    let uvs = topo.uvs();
    let mut image = vec![0.0; w * h * ch];
    image
        .par_chunks_mut(ch)
        .zip(frags.par_iter())
        .for_each(|(px, f)| {
            if let Some(f) = f {
                let tri = topo.triangles()[f.triangle];
                let mut uv = [0.0; 2];
                for k in 0..3 {
                    uv[0] += f.bary[k] * uvs[tri[k]][0];
                    uv[1] += f.bary[k] * uvs[tri[k]][1];
                }
                let (u, v) = (uv[0].clamp(0.0, 1.0), uv[1].clamp(0.0, 1.0));
                for (c, slot) in px.iter_mut().enumerate() {
                    *slot = texture.sample_channel(u, v, c).expect("clamped uv, valid channel");
                }
            }
        });
    Ok(RenderOutput {
        image: UvField::from_data(w, h, ch, FieldKind::Image, image)?,
        depth: frags.iter().map(|f| f.map_or(0.0, |f| f.depth)).collect(),
        coverage: frags.iter().map(Option::is_some).collect(),
        triangle: frags.iter().map(|f| f.map(|f| f.triangle)).collect(),
    })
}

/// Shades `mesh` (which must carry normals) with albedo and lighting, then
/// rasterizes it. Normals are baked at the albedo resolution.
pub fn render_mesh(mesh: &Mesh, albedo: &UvField, gamma: &[f64], camera: &Camera) -> Result<RenderOutput> {
    let normals = bake_normals(mesh, albedo.width(), albedo.height())?;
    let texture = shade(albedo, &normals, gamma)?;
    rasterize(mesh, &texture, camera)
}

/// Renders the posed coarse shape of a coefficient set.
pub fn render_coefficients(
    model: &MorphableModel,
    coeffs: &CoefficientSet,
    camera: &Camera,
) -> Result<RenderOutput> {
    let mesh = model.posed_shape(coeffs)?.with_normals()?;
    let (albedo, _) = model.synthesize_albedo(&coeffs.alpha)?;
    render_mesh(&mesh, &albedo, &coeffs.gamma, camera)
}

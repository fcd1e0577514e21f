//! Triangle meshes with a per-vertex UV chart, region masks and landmark anchors.

mod obj;
pub(crate) mod patch;
mod uvfield;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use obj::{load_obj, save_obj};
pub use patch::{face_patch, PatchRegions, PATCH_GRID, PATCH_LANDMARKS};
pub use uvfield::{FieldKind, FieldSidecar, UvField};

pub type Vec3 = Vector3<f64>;

/// Minimum triangle area accepted by normal computation.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Where a landmark sits on the surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkAnchor {
    Vertex(usize),
    Barycentric { triangle: usize, weights: [f64; 3] },
}

/// Serialized form of a [`Topology`]; adjacency is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyData {
    pub triangles: Vec<[usize; 3]>,
    pub uvs: Vec<[f64; 2]>,
    #[serde(default)]
    pub landmarks: Vec<LandmarkAnchor>,
    #[serde(default)]
    pub regions: BTreeMap<String, Vec<usize>>,
}

/// Connectivity, UV chart and annotations shared by every mesh of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    triangles: Vec<[usize; 3]>,
    uvs: Vec<[f64; 2]>,
    neighbors: Vec<Vec<usize>>,
    landmarks: Vec<LandmarkAnchor>,
    regions: BTreeMap<String, Vec<usize>>,
}

impl Topology {
    /// Builds a topology and checks its invariants. Every vertex must belong
    /// to at least one triangle.
    pub fn new(
        triangles: Vec<[usize; 3]>,
        uvs: Vec<[f64; 2]>,
        landmarks: Vec<LandmarkAnchor>,
        regions: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        let n = uvs.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i >= n {
                    return Err(Error::InvalidArgument(format!(
                        "triangle {t} references vertex {i} of {n}"
                    )));
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidArgument(format!(
                    "triangle {t} repeats a vertex"
                )));
            }
        }
        for (i, uv) in uvs.iter().enumerate() {
            if !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) {
                return Err(Error::InvalidArgument(format!(
                    "uv of vertex {i} outside [0,1]: {uv:?}"
                )));
            }
        }
        let mut neighbors = vec![Vec::new(); n];
        for tri in &triangles {
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.is_empty() {
                return Err(Error::InvalidArgument(format!("vertex {i} has no edges")));
            }
        }
        for (l, anchor) in landmarks.iter().enumerate() {
            match *anchor {
                LandmarkAnchor::Vertex(v) if v >= n => {
                    return Err(Error::InvalidArgument(format!(
                        "landmark {l} references vertex {v} of {n}"
                    )));
                }
                LandmarkAnchor::Barycentric { triangle, weights } => {
                    if triangle >= triangles.len() {
                        return Err(Error::InvalidArgument(format!(
                            "landmark {l} references triangle {triangle}"
                        )));
                    }
                    let s: f64 = weights.iter().sum();
                    if (s - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidArgument(format!(
                            "landmark {l} weights sum to {s}"
                        )));
                    }
                }
                _ => {}
            }
        }
        for (name, set) in &regions {
            if let Some(&bad) = set.iter().find(|&&v| v >= n) {
                return Err(Error::InvalidArgument(format!(
                    "region {name} references vertex {bad}"
                )));
            }
        }
        Ok(Self {
            triangles,
            uvs,
            neighbors,
            landmarks,
            regions,
        })
    }

    pub fn from_data(data: TopologyData) -> Result<Self> {
        Self::new(data.triangles, data.uvs, data.landmarks, data.regions)
    }

    pub fn to_data(&self) -> TopologyData {
        TopologyData {
            triangles: self.triangles.clone(),
            uvs: self.uvs.clone(),
            landmarks: self.landmarks.clone(),
            regions: self.regions.clone(),
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.uvs.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn uvs(&self) -> &[[f64; 2]] {
        &self.uvs
    }

    /// Sorted neighbor list of `v`; each entry is one incident edge.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn landmarks(&self) -> &[LandmarkAnchor] {
        &self.landmarks
    }

    pub fn region(&self, name: &str) -> Option<&[usize]> {
        self.regions.get(name).map(Vec::as_slice)
    }

    pub fn regions(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.regions
    }

    /// 0/1 weight per vertex for a named region.
    pub fn region_weights(&self, name: &str) -> Option<Vec<f64>> {
        let set = self.region(name)?;
        let mut w = vec![0.0; self.vertex_count()];
        for &v in set {
            w[v] = 1.0;
        }
        Some(w)
    }

    /// Vertices and blend weights a landmark reads from.
    pub fn anchor_terms(&self, anchor: &LandmarkAnchor) -> [(usize, f64); 3] {
        match *anchor {
            LandmarkAnchor::Vertex(v) => [(v, 1.0), (v, 0.0), (v, 0.0)],
            LandmarkAnchor::Barycentric { triangle, weights } => {
                let t = self.triangles[triangle];
                [(t[0], weights[0]), (t[1], weights[1]), (t[2], weights[2])]
            }
        }
    }

    /// Rasterizes a vertex region into UV space and thresholds at one half.
    pub fn uv_mask(&self, region: &str, width: usize, height: usize) -> Result<UvField> {
        let weights = self
            .region_weights(region)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown region {region}")))?;
        let mut field = crate::raster::rasterize_uv(self, &weights, width, height)?;
        for x in field.data_mut() {
            *x = if *x >= 0.5 { 1.0 } else { 0.0 };
        }
        field.set_kind(FieldKind::Mask);
        Ok(field)
    }
}

/// Vertex positions over a shared topology, with optional unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    topology: Arc<Topology>,
    positions: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl Mesh {
    pub fn new(topology: Arc<Topology>, positions: Vec<Vec3>) -> Result<Self> {
        crate::error::check_len("mesh positions", topology.vertex_count(), positions.len())?;
        Ok(Self {
            topology,
            positions,
            normals: None,
        })
    }

    /// Builds a mesh from an interleaved `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat(topology: Arc<Topology>, flat: &[f64]) -> Result<Self> {
        crate::error::check_len("flat mesh buffer", topology.vertex_count() * 3, flat.len())?;
        let positions = flat
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect();
        Self::new(topology, positions)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [Vec3] {
        self.normals = None;
        &mut self.positions
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    /// Attaches normals; each must have unit length within 1e-6.
    pub fn set_normals(&mut self, normals: Vec<Vec3>) -> Result<()> {
        crate::error::check_len("normals", self.positions.len(), normals.len())?;
        if let Some((i, n)) = normals
            .iter()
            .enumerate()
            .find(|(_, n)| (n.norm() - 1.0).abs() > 1e-6)
        {
            return Err(Error::InvalidArgument(format!(
                "normal {i} has length {}",
                n.norm()
            )));
        }
        self.normals = Some(normals);
        Ok(())
    }

    /// Returns a copy carrying freshly computed normals.
    pub fn with_normals(mut self) -> Result<Self> {
        let normals = compute_normals(&self)?;
        self.normals = Some(normals);
        Ok(self)
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn landmark_positions(&self) -> Vec<Vec3> {
        self.topology
            .landmarks()
            .iter()
            .map(|a| {
                self.topology
                    .anchor_terms(a)
                    .iter()
                    .fold(Vec3::zeros(), |acc, &(v, w)| acc + self.positions[v] * w)
            })
            .collect()
    }
}

/// Area-weighted vertex normals.
pub fn compute_normals(mesh: &Mesh) -> Result<Vec<Vec3>> {
    let topo = mesh.topology();
    let pos = mesh.positions();
    let mut acc = vec![Vec3::zeros(); pos.len()];
    for (t, tri) in topo.triangles().iter().enumerate() {
        let [a, b, c] = *tri;
        // |cross| is twice the area, so the sum is area weighted.
        let cross = (pos[b] - pos[a]).cross(&(pos[c] - pos[a]));
        let area = 0.5 * cross.norm();
        if !(area > MIN_TRIANGLE_AREA) {
            return Err(Error::DegenerateTriangle { index: t, area });
        }
        for &v in tri {
            acc[v] += cross;
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                Ok(n / len)
            } else {
                Err(Error::Degenerate(format!("vertex {i} normal cancels out")))
            }
        })
        .collect()
}

//! Built-in procedural face patch: a 48×48 vertex grid warped into a convex
//! dome with a nose bump, annotated with regions and 669 landmarks.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{LandmarkAnchor, Mesh, Topology, Vec3};

pub const PATCH_GRID: usize = 48;
pub const PATCH_LANDMARKS: usize = 669;

/// Region names used by the procedural patch.
pub struct PatchRegions;

impl PatchRegions {
    pub const FRONTAL_FACE: &'static str = "frontal-face";
    pub const DETAIL_FACE: &'static str = "detail-face";
    pub const EYEBROW: &'static str = "eyebrow";
    pub const MOUTH: &'static str = "mouth";
    pub const LEFT_EYE: &'static str = "left-eye";
    pub const RIGHT_EYE: &'static str = "right-eye";
}

pub(crate) const HALF_WIDTH: f64 = 1.0;
pub(crate) const HALF_HEIGHT: f64 = 1.2;
pub(crate) const EYE_CENTERS: [(f64, f64); 2] = [(-0.38, 0.22), (0.38, 0.22)];
pub(crate) const EYE_RADIUS: f64 = 0.17;

/// Planar (x, y) of a UV coordinate; v grows downward.
pub(crate) fn uv_to_xy(u: f64, v: f64) -> (f64, f64) {
    ((u - 0.5) * 2.0 * HALF_WIDTH, (0.5 - v) * 2.0 * HALF_HEIGHT)
}

fn xy_to_uv(x: f64, y: f64) -> (f64, f64) {
    (x / (2.0 * HALF_WIDTH) + 0.5, 0.5 - y / (2.0 * HALF_HEIGHT))
}

pub(crate) fn dome_height(x: f64, y: f64) -> f64 {
    let yn = y / HALF_HEIGHT;
    let base = 0.9 * (1.0 - 0.45 * x * x - 0.3 * yn * yn);
    let nose = 0.25 * (-(x * x + (y + 0.1) * (y + 0.1)) / 0.08).exp();
    base + nose
}

fn in_ellipse(x: f64, y: f64, a: f64, b: f64) -> bool {
    (x / a).powi(2) + (y / b).powi(2) <= 1.0
}

/// The mean-shape mesh of the procedural patch with its full topology.
pub fn face_patch() -> Mesh {
    let n = PATCH_GRID;
    let step = 1.0 / (n - 1) as f64;
    let mut uvs = Vec::with_capacity(n * n);
    let mut positions = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let (u, v) = (i as f64 * step, j as f64 * step);
            let (x, y) = uv_to_xy(u, v);
            uvs.push([u, v]);
            positions.push(Vec3::new(x, y, dome_height(x, y)));
        }
    }
    let mut triangles = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let a = j * n + i;
            let b = a + 1;
            let c = a + n;
            let d = c + 1;
            // Counter-clockwise seen from +z.
            triangles.push([a, c, b]);
            triangles.push([b, c, d]);
        }
    }

    let mut regions: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut add = |name: &str, pred: &dyn Fn(f64, f64) -> bool| {
        let set = positions
            .iter()
            .enumerate()
            .filter(|(_, p)| pred(p.x, p.y))
            .map(|(i, _)| i)
            .collect();
        regions.insert(name.to_string(), set);
    };
    add(PatchRegions::FRONTAL_FACE, &|x, y| in_ellipse(x, y, 0.85, 1.05));
    add(PatchRegions::DETAIL_FACE, &|x, y| in_ellipse(x, y, 0.9, 1.1));
    add(PatchRegions::EYEBROW, &|x, y| (0.35..=0.6).contains(&y) && x.abs() < 0.75);
    add(PatchRegions::MOUTH, &|x, y| (-0.75..=-0.35).contains(&y) && x.abs() < 0.5);
    for (name, (cx, cy)) in [PatchRegions::LEFT_EYE, PatchRegions::RIGHT_EYE]
        .into_iter()
        .zip(EYE_CENTERS)
    {
        add(name, &move |x, y| (x - cx).hypot(y - cy) <= EYE_RADIUS);
    }

    let landmarks = sunflower_landmarks(&uvs, &triangles);
    let topo = Topology::new(triangles, uvs, landmarks, regions)
        .expect("procedural patch topology is valid");
    Mesh::new(Arc::new(topo), positions).expect("vertex count matches")
}

/// Landmarks on a golden-angle spiral inside the frontal ellipse, each
/// anchored to the grid triangle containing it.
fn sunflower_landmarks(uvs: &[[f64; 2]], triangles: &[[usize; 3]]) -> Vec<LandmarkAnchor> {
    let n = PATCH_GRID;
    let cells = (n - 1) as f64;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..PATCH_LANDMARKS)
        .map(|k| {
            let r = ((k as f64 + 0.5) / PATCH_LANDMARKS as f64).sqrt();
            let a = k as f64 * golden;
            let (u, v) = xy_to_uv(0.8 * r * a.cos(), 1.0 * r * a.sin());
            let ci = ((u * cells).floor() as usize).min(n - 2);
            let cj = ((v * cells).floor() as usize).min(n - 2);
            let fu = u * cells - ci as f64;
            let fv = v * cells - cj as f64;
            let quad = 2 * (cj * (n - 1) + ci);
            let triangle = if fu + fv <= 1.0 { quad } else { quad + 1 };
            let weights = barycentric_2d(triangles[triangle].map(|i| uvs[i]), [u, v]);
            LandmarkAnchor::Barycentric { triangle, weights }
        })
        .collect()
}

pub(crate) fn barycentric_2d(t: [[f64; 2]; 3], p: [f64; 2]) -> [f64; 3] {
    let [a, b, c] = t;
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let w1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
    let w2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
    [1.0 - w1 - w2, w1, w2]
}

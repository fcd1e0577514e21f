//! Scanline-free half-plane triangle rasterizer shared by UV baking and
//! image rendering. Pixel centers sit at integer + 0.5, shared edges follow
//! a top-left fill rule, and rows are processed in parallel without
//! changing the result.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{FieldKind, Topology, UvField};

/// The visible surface sample at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub triangle: usize,
    pub bary: [f64; 3],
    pub depth: f64,
}

#[inline]
fn edge_raw(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Edge function evaluated in a canonical endpoint order so that
/// `edge(a, b, p) == -edge(b, a, p)` holds exactly; otherwise two triangles
/// sharing an edge can both claim a sample next to it.
#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    if (a[0], a[1]) <= (b[0], b[1]) {
        edge_raw(a, b, p)
    } else {
        -edge_raw(b, a, p)
    }
}

#[inline]
fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

/// A triangle prepared for coverage tests. Vertices are reordered to a
/// positive signed area; `order` maps back to the caller's corners.
#[derive(Debug, Clone, Copy)]
struct Setup {
    p: [[f64; 2]; 3],
    order: [usize; 3],
    area: f64,
    tl: [bool; 3],
    rows: (usize, usize),
    cols: (usize, usize),
}

impl Setup {
    fn new(p: [[f64; 2]; 3], width: usize, height: usize) -> Option<Self> {
        let mut area = edge(p[0], p[1], p[2]);
        let (p, order) = if area < 0.0 {
            area = -area;
            ([p[0], p[2], p[1]], [0, 2, 1])
        } else {
            (p, [0, 1, 2])
        };
        if !(area > 0.0) || !area.is_finite() {
            return None;
        }
        let xmin = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
        let xmax = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
        let ymin = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
        let ymax = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max);
        // Pixel i is a candidate when its center i + 0.5 lies in [min, max].
        let lo = |m: f64| (m - 0.5).ceil().max(0.0) as usize;
        let hi = |m: f64, n: usize| ((m - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
        let rows = (lo(ymin), hi(ymax, height));
        let cols = (lo(xmin), hi(xmax, width));
        if rows.0 >= rows.1 || cols.0 >= cols.1 {
            return None;
        }
        Some(Self {
            tl: [
                is_top_left(p[1], p[2]),
                is_top_left(p[2], p[0]),
                is_top_left(p[0], p[1]),
            ],
            p,
            order,
            area,
            rows,
            cols,
        })
    }

    /// Barycentrics in the caller's corner order when `q` is covered.
    #[inline]
    fn cover(&self, q: [f64; 2]) -> Option<[f64; 3]> {
        let e = [
            edge(self.p[1], self.p[2], q),
            edge(self.p[2], self.p[0], q),
            edge(self.p[0], self.p[1], q),
        ];
        for k in 0..3 {
            if e[k] < 0.0 || (e[k] == 0.0 && !self.tl[k]) {
                return None;
            }
        }
        let mut bary = [0.0; 3];
        for k in 0..3 {
            bary[self.order[k]] = e[k] / self.area;
        }
        Some(bary)
    }
}

fn bin_rows(setups: &[Option<Setup>], height: usize) -> Vec<Vec<usize>> {
    let mut bins = vec![Vec::new(); height];
    for (t, s) in setups.iter().enumerate() {
        if let Some(s) = s {
            for row in &mut bins[s.rows.0..s.rows.1] {
                row.push(t);
            }
        }
    }
    bins
}

/// Z-buffered visibility: per pixel, the nearest covering triangle. Larger
/// depth is nearer; on exact ties the lower triangle index wins.
pub fn visibility(
    width: usize,
    height: usize,
    vertices: &[[f64; 3]],
    triangles: &[[usize; 3]],
) -> Result<Vec<Option<Fragment>>> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("zero-resolution image".into()));
    }
    let setups: Vec<Option<Setup>> = triangles
        .iter()
        .map(|t| Setup::new(t.map(|i| [vertices[i][0], vertices[i][1]]), width, height))
        .collect();
    let bins = bin_rows(&setups, height);
    let mut out = vec![None; width * height];
    out.par_chunks_mut(width)
        .zip(bins.par_iter())
        .enumerate()
        .for_each(|(y, (row, cands))| {
            let py = y as f64 + 0.5;
            for &t in cands {
                let s = setups[t].as_ref().expect("binned triangles have a setup");
                let tri = triangles[t];
                for x in s.cols.0..s.cols.1 {
                    if let Some(bary) = s.cover([x as f64 + 0.5, py]) {
                        let depth = bary[0] * vertices[tri[0]][2]
                            + bary[1] * vertices[tri[1]][2]
                            + bary[2] * vertices[tri[2]][2];
                        let slot: &mut Option<Fragment> = &mut row[x];
                        if slot.is_none_or(|f| depth > f.depth) {
                            *slot = Some(Fragment {
                                triangle: t,
                                bary,
                                depth,
                            });
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Bakes per-vertex values (`channels` per vertex) into UV space by
/// barycentric interpolation. Uncovered texels are zero; a texel covered by
/// two triangles is an error because the chart must be injective.
pub fn rasterize_uv_channels(
    topo: &Topology,
    values: &[f64],
    channels: usize,
    width: usize,
    height: usize,
) -> Result<(UvField, Vec<bool>)> {
    crate::error::check_len("per-vertex values", topo.vertex_count() * channels, values.len())?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("zero-resolution field".into()));
    }
    let uvs = topo.uvs();
    let triangles = topo.triangles();
    let setups: Vec<Option<Setup>> = triangles
        .iter()
        .map(|t| {
            Setup::new(
                t.map(|i| [uvs[i][0] * width as f64, uvs[i][1] * height as f64]),
                width,
                height,
            )
        })
        .collect();
    let bins = bin_rows(&setups, height);
    let mut data = vec![0.0; width * height * channels];
    let mut covered = vec![false; width * height];
    let errors: Vec<Error> = data
        .par_chunks_mut(width * channels)
        .zip(covered.par_chunks_mut(width))
        .zip(bins.par_iter())
        .enumerate()
        .filter_map(|(y, ((row, cov), cands))| {
            let mut owner: Vec<Option<usize>> = vec![None; width];
            let py = y as f64 + 0.5;
            for &t in cands {
                let s = setups[t].as_ref().expect("binned triangles have a setup");
                let tri = triangles[t];
                for x in s.cols.0..s.cols.1 {
                    let Some(bary) = s.cover([x as f64 + 0.5, py]) else {
                        continue;
                    };
                    if let Some(first) = owner[x] {
                        return Some(Error::UvOverlap {
                            first,
                            second: t,
                            x,
                            y,
                        });
                    }
                    owner[x] = Some(t);
                    cov[x] = true;
                    for c in 0..channels {
                        row[x * channels + c] = bary[0] * values[tri[0] * channels + c]
                            + bary[1] * values[tri[1] * channels + c]
                            + bary[2] * values[tri[2] * channels + c];
                    }
                }
            }
            None
        })
        .collect();
    if let Some(e) = errors.into_iter().next() {
        return Err(e);
    }
    let field = UvField::from_data(width, height, channels, FieldKind::Other, data)?;
    Ok((field, covered))
}

/// Single-channel convenience wrapper over [`rasterize_uv_channels`].
pub fn rasterize_uv(topo: &Topology, values: &[f64], width: usize, height: usize) -> Result<UvField> {
    rasterize_uv_channels(topo, values, 1, width, height).map(|(f, _)| f)
}

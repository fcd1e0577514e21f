//! Minimal Wavefront OBJ reader/writer for `v`, `vt` and `f` records.
//!
//! UV `v` is stored exactly as the in-memory chart uses it (0 = top row),
//! without the bottom-up flip some tools apply.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::{Mesh, Topology, Vec3};
use crate::error::{Error, Result};

/// Formats with 9 significant digits, printed as the shortest decimal that
/// parses back to the same value.
pub(crate) fn fmt9(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("{rounded}")
}

pub fn save_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in mesh.positions() {
        let _ = writeln!(out, "v {} {} {}", fmt9(p.x), fmt9(p.y), fmt9(p.z));
    }
    for uv in mesh.topology().uvs() {
        let _ = writeln!(out, "vt {} {}", fmt9(uv[0]), fmt9(uv[1]));
    }
    for tri in mesh.topology().triangles() {
        let [a, b, c] = tri.map(|i| i + 1);
        let _ = writeln!(out, "f {a}/{a} {b}/{b} {c}/{c}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_obj(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut positions: Vec<Vec3> = Vec::new();
    let mut uvs: Vec<[f64; 2]> = Vec::new();
    let mut position_lines: Vec<usize> = Vec::new();
    let mut faces: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        let floats = |tokens: std::str::SplitWhitespace<'_>, n: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = tokens
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(line_no, format!("bad number: {e}")))?;
            if vals.len() < n || vals.iter().any(|v| !v.is_finite()) {
                return Err(err(line_no, format!("expected {n} finite numbers")));
            }
            Ok(vals)
        };
        match tag {
            "v" => {
                let v = floats(tokens, 3)?;
                positions.push(Vec3::new(v[0], v[1], v[2]));
                position_lines.push(line_no);
            }
            "vt" => {
                let v = floats(tokens, 2)?;
                if !(0.0..=1.0).contains(&v[0]) || !(0.0..=1.0).contains(&v[1]) {
                    return Err(err(line_no, format!("uv ({}, {}) outside [0,1]", v[0], v[1])));
                }
                uvs.push([v[0], v[1]]);
            }
            "f" => {
                let mut face = Vec::new();
                for tok in tokens {
                    let mut parts = tok.split('/');
                    let resolve = |s: Option<&str>, count: usize, what: &str| -> Result<usize> {
                        let s = s.filter(|s| !s.is_empty()).ok_or_else(|| {
                            err(line_no, format!("face vertex `{tok}` has no {what} index"))
                        })?;
                        let i: i64 = s
                            .parse()
                            .map_err(|_| err(line_no, format!("bad {what} index `{s}`")))?;
                        let idx = if i < 0 { count as i64 + i } else { i - 1 };
                        if idx < 0 || idx as usize >= count {
                            return Err(err(
                                line_no,
                                format!("{what} index {i} out of range (have {count})"),
                            ));
                        }
                        Ok(idx as usize)
                    };
                    let p = resolve(parts.next(), positions.len(), "vertex")?;
                    let t = resolve(parts.next(), uvs.len(), "uv")?;
                    face.push((p, t));
                }
                if face.len() < 3 {
                    return Err(err(line_no, "face with fewer than 3 vertices".into()));
                }
                faces.push((line_no, face));
            }
            _ => {}
        }
    }
    if faces.is_empty() {
        return Err(err(0, "no faces".into()));
    }
    // A position keeps its own index for the first UV it is paired with;
    // further pairings (seams) are appended after all positions.
    let mut remap: HashMap<(usize, usize), usize> = HashMap::new();
    let mut claimed = vec![false; positions.len()];
    for (_, face) in &faces {
        for &(p, t) in face {
            if !claimed[p] {
                claimed[p] = true;
                remap.insert((p, t), p);
            }
        }
    }
    if let Some(p) = claimed.iter().position(|c| !c) {
        return Err(err(position_lines[p], format!("vertex {} is not used by any face", p + 1)));
    }
    let mut out_pos = positions.clone();
    let mut out_uv: Vec<[f64; 2]> = vec![[0.0; 2]; positions.len()];
    for (&(p, t), &id) in &remap {
        out_uv[id] = uvs[t];
        debug_assert_eq!(id, p);
    }
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for (line_no, face) in &faces {
        let ids: Vec<usize> = face
            .iter()
            .map(|&(p, t)| {
                *remap.entry((p, t)).or_insert_with(|| {
                    out_pos.push(positions[p]);
                    out_uv.push(uvs[t]);
                    out_pos.len() - 1
                })
            })
            .collect();
        for k in 1..ids.len() - 1 {
            let tri = [ids[0], ids[k], ids[k + 1]];
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(err(*line_no, "face repeats a vertex".into()));
            }
            triangles.push(tri);
        }
    }
    let topo = Topology::new(triangles, out_uv, Vec::new(), BTreeMap::new())
        .map_err(|e| err(0, e.to_string()))?;
    Mesh::new(Arc::new(topo), out_pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_text() -> &'static str {
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 1\nvt 1 1\nvt 1 0\nvt 0 0\nf 1/1 2/2 3/3 4/4\n"
    }

    #[test]
    fn quad_face_fans_into_two_triangles() {
        let mesh = parse_obj(quad_text(), Path::new("quad.obj")).unwrap();
        assert_eq!(mesh.topology().triangles(), &[[0, 1, 2], [0, 2, 3]]);
        assert_eq!(mesh.topology().uvs()[2], [1.0, 0.0]);
    }

    #[test]
    fn save_then_load_quad() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = parse_obj(quad_text(), Path::new("quad.obj")).unwrap();
        let path = dir.path().join("q.obj");
        save_obj(&mesh, &path).unwrap();
        let back = load_obj(&path).unwrap();
        assert_eq!(back.positions(), mesh.positions());
        assert_eq!(back.topology().uvs(), mesh.topology().uvs());
        assert_eq!(back.topology().triangles(), mesh.topology().triangles());
    }

    #[test]
    fn out_of_range_vertex_reports_line() {
        let mut text = String::new();
        for i in 0..8 {
            text += &format!("v {i} 0 0\n");
        }
        text += "vt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\nf 1/1 99/2 3/3\n";
        match parse_obj(&text, Path::new("x.obj")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 13),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_uv_reports_line() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1 2 3\n";
        match parse_obj(text, Path::new("x.obj")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 5);
                assert!(message.contains("uv"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seam_vertices_are_duplicated() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nvt 1 1\nvt 0.5 0.5\n\
                    f 1/1 2/2 3/3\nf 2/5 4/4 3/3\n";
        let mesh = parse_obj(text, Path::new("x.obj")).unwrap();
        assert_eq!(mesh.topology().vertex_count(), 5);
    }

    #[test]
    fn round_trip_is_idempotent_after_first_cycle() {
        let dir = tempfile::tempdir().unwrap();
        let mut mesh = crate::mesh::face_patch();
        for (i, p) in mesh.positions_mut().iter_mut().enumerate() {
            p.x += (i as f64 * 0.1234567891234).sin() * 1e-3;
        }
        let a = dir.path().join("a.obj");
        let b = dir.path().join("b.obj");
        save_obj(&mesh, &a).unwrap();
        let once = load_obj(&a).unwrap();
        for (p, q) in once.positions().iter().zip(mesh.positions()) {
            for k in 0..3 {
                // Nine significant digits: half a unit in the ninth place.
                assert!((p[k] - q[k]).abs() <= 5e-9 * q[k].abs() + 1e-15);
            }
        }
        save_obj(&once, &b).unwrap();
        let twice = load_obj(&b).unwrap();
        assert_eq!(once.positions(), twice.positions());
        assert_eq!(once.topology().uvs(), twice.topology().uvs());
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}

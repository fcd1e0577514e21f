//! Deterministic synthetic scan populations.
//!
//! Every sample draws from its own ChaCha stream `(kind, index)` so a set is
//! reproducible per seed regardless of evaluation order. Displacement samples
//! are masked by the detail-face UV mask and zero outside it.

use std::f64::consts::{PI, TAU};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::procedural::EXPRESSION_PRIMITIVES;
use super::{SampleKind, SampleSet};
use crate::error::{Error, Result};
use crate::mesh::patch::{uv_to_xy, EYE_CENTERS};
use crate::mesh::{face_patch, PatchRegions, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    /// Displacement grids are `uv_resolution²` texels.
    pub uv_resolution: usize,
    pub albedo_resolution: usize,
    pub shape_count: usize,
    pub expression_count: usize,
    pub albedo_count: usize,
    pub static_count: usize,
    /// Count of compressed and of stretched samples.
    pub dynamic_count: usize,
    /// Relative size of identity deformations.
    pub shape_amplitude: f64,
    /// Peak primitive offset in model units.
    pub expression_amplitude: f64,
    pub albedo_amplitude: f64,
    /// Wrinkle amplitude for age 0 and age 1, model units.
    pub static_amplitude: [f64; 2],
    /// Ridge amplitude range, model units.
    pub dynamic_amplitude: [f64; 2],
    /// Number of sinusoid orientations/frequencies in the wrinkle dictionary.
    pub wrinkle_atoms: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            uv_resolution: 256,
            albedo_resolution: 128,
            shape_count: 332,
            expression_count: 200,
            albedo_count: 100,
            static_count: 332,
            dynamic_count: 332,
            shape_amplitude: 0.05,
            expression_amplitude: 0.08,
            albedo_amplitude: 0.05,
            static_amplitude: [0.002, 0.01],
            dynamic_amplitude: [0.002, 0.008],
            wrinkle_atoms: 160,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("shape_count", self.shape_count),
            ("expression_count", self.expression_count),
            ("albedo_count", self.albedo_count),
            ("static_count", self.static_count),
            ("dynamic_count", self.dynamic_count),
            ("uv_resolution", self.uv_resolution),
            ("albedo_resolution", self.albedo_resolution),
            ("wrinkle_atoms", self.wrinkle_atoms),
        ];
        for (name, c) in counts {
            if c == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        for (name, [lo, hi]) in [
            ("static_amplitude", self.static_amplitude),
            ("dynamic_amplitude", self.dynamic_amplitude),
        ] {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} range [{lo}, {hi}]")));
            }
        }
        for (name, a) in [
            ("shape_amplitude", self.shape_amplitude),
            ("expression_amplitude", self.expression_amplitude),
            ("albedo_amplitude", self.albedo_amplitude),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} = {a}")));
            }
        }
        Ok(())
    }

    fn count(&self, kind: SampleKind) -> usize {
        match kind {
            SampleKind::Shape => self.shape_count,
            SampleKind::Expression => self.expression_count,
            SampleKind::Albedo => self.albedo_count,
            SampleKind::StaticDisplacement => self.static_count,
            SampleKind::Compressed | SampleKind::Stretched => self.dynamic_count,
        }
    }
}

fn stream_rng(seed: u64, kind: SampleKind, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind.stream() << 32) | index);
    rng
}

fn dictionary_rng(seed: u64, kind: SampleKind) -> ChaCha8Rng {
    stream_rng(seed, kind, 0xFFFF_FFFF)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates the sample set of one kind.
pub fn generate_scans(config: &ScanConfig, kind: SampleKind, seed: u64) -> Result<SampleSet> {
    config.validate()?;
    let n = config.count(kind);
    if n < 2 {
        return Err(Error::InvalidArgument(format!("{kind:?} count {n} < 2")));
    }
    match kind {
        SampleKind::Shape => SampleSet::new(kind, shapes(config, seed), seed, None),
        SampleKind::Expression => SampleSet::new(kind, expressions(config, seed), seed, None),
        SampleKind::Albedo => SampleSet::new(kind, albedos(config, seed), seed, None),
        SampleKind::StaticDisplacement => {
            let (samples, ages) = wrinkles(config, seed)?;
            SampleSet::new(kind, samples, seed, Some(ages))
        }
        SampleKind::Compressed | SampleKind::Stretched => {
            SampleSet::new(kind, ridges(config, kind, seed)?, seed, None)
        }
    }
}

fn gaussian(x: f64, y: f64, cx: f64, cy: f64, sx: f64, sy: f64) -> f64 {
    (-0.5 * (((x - cx) / sx).powi(2) + ((y - cy) / sy).powi(2))).exp()
}

fn shapes(config: &ScanConfig, seed: u64) -> Vec<Vec<f64>> {
    let base = face_patch();
    let amp = config.shape_amplitude;
    let pivot = Vec3::new(0.0, 0.0, -1.5);
    (0..config.shape_count)
        .map(|i| {
            let mut rng = stream_rng(seed, SampleKind::Shape, i as u64);
            let scale = Vec3::new(
                1.0 + 2.0 * amp * normal(&mut rng),
                1.0 + 2.0 * amp * normal(&mut rng),
                1.0 + 2.0 * amp * normal(&mut rng),
            );
            let bumps: Vec<[f64; 4]> = (0..6)
                .map(|_| {
                    [
                        rng.random_range(-0.8..0.8),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(0.2..0.5),
                        amp * normal(&mut rng),
                    ]
                })
                .collect();
            let mut out = Vec::with_capacity(base.positions().len() * 3);
            for p in base.positions() {
                let radial = (p - pivot).normalize();
                let offset: f64 = bumps
                    .iter()
                    .map(|b| b[3] * gaussian(p.x, p.y, b[0], b[1], b[2], b[2]))
                    .sum();
                let q = p.component_mul(&scale) + radial * offset;
                out.extend([q.x, q.y, q.z]);
            }
            out
        })
        .collect()
}

/// Random sparse combinations of the localized primitives, as offsets.
fn expressions(config: &ScanConfig, seed: u64) -> Vec<Vec<f64>> {
    let base = face_patch();
    let fields: Vec<Vec<Vec3>> = EXPRESSION_PRIMITIVES
        .iter()
        .map(|p| base.positions().iter().map(|v| p.offset(v.x, v.y)).collect())
        .collect();
    (0..config.expression_count)
        .map(|i| {
            let mut rng = stream_rng(seed, SampleKind::Expression, i as u64);
            let mut out = vec![0.0; base.positions().len() * 3];
            for field in &fields {
                if !rng.random_bool(0.5) {
                    continue;
                }
                let a = config.expression_amplitude * rng.random_range(-1.0..1.0);
                for (v, d) in field.iter().enumerate() {
                    out[3 * v] += a * d.x;
                    out[3 * v + 1] += a * d.y;
                    out[3 * v + 2] += a * d.z;
                }
            }
            out
        })
        .collect()
}

fn texel_xy(i: usize, j: usize, w: usize, h: usize) -> (f64, f64) {
    uv_to_xy((i as f64 + 0.5) / w as f64, (j as f64 + 0.5) / h as f64)
}

fn band(t: f64, lo: f64, hi: f64, soft: f64) -> f64 {
    let rise = ((t - lo) / soft + 0.5).clamp(0.0, 1.0);
    let fall = ((hi - t) / soft + 0.5).clamp(0.0, 1.0);
    let s = |x: f64| x * x * (3.0 - 2.0 * x);
    s(rise) * s(fall)
}

fn albedos(config: &ScanConfig, seed: u64) -> Vec<Vec<f64>> {
    let r = config.albedo_resolution;
    let amp = config.albedo_amplitude;
    let xy: Vec<(f64, f64)> = (0..r * r).map(|t| texel_xy(t % r, t / r, r, r)).collect();
    (0..config.albedo_count)
        .map(|i| {
            let mut rng = stream_rng(seed, SampleKind::Albedo, i as u64);
            let tone = normal(&mut rng);
            let base = [0.78 + amp * tone, 0.6 + 0.9 * amp * tone, 0.5 + 0.8 * amp * tone];
            let blobs: Vec<[f64; 6]> = (0..4)
                .map(|_| {
                    [
                        rng.random_range(-0.9..0.9),
                        rng.random_range(-1.1..1.1),
                        rng.random_range(0.2..0.6),
                        amp * normal(&mut rng),
                        amp * normal(&mut rng),
                        amp * normal(&mut rng),
                    ]
                })
                .collect();
            let lip = 1.0 + 0.5 * normal(&mut rng);
            let brow = 1.0 + 0.5 * normal(&mut rng);
            let mut out = Vec::with_capacity(r * r * 3);
            for &(x, y) in &xy {
                let lips = lip * band(y, -0.7, -0.45, 0.1) * band(x, -0.35, 0.35, 0.1);
                let brows = brow * band(y, 0.4, 0.55, 0.08) * band(x.abs(), 0.1, 0.65, 0.1);
                for c in 0..3 {
                    let mut v = base[c];
                    for b in &blobs {
                        v += b[3 + c] * gaussian(x, y, b[0], b[1], b[2], b[2]);
                    }
                    v += lips * [0.08, -0.05, -0.04][c] - brows * 0.2;
                    out.push(v.clamp(0.02, 0.98));
                }
            }
            out
        })
        .collect()
}

fn detail_mask(res: usize) -> Result<Vec<f64>> {
    let patch = face_patch();
    Ok(patch
        .topology()
        .uv_mask(PatchRegions::DETAIL_FACE, res, res)?
        .into_data())
}

/// `samples[s][t] = mask[t] · Σ_a coeffs[(s, a)] · atom_a(t)`, evaluated in
/// texel blocks so the atom table never exists at full resolution.
fn synthesize_fields(
    coeffs: &DMatrix<f64>,
    res: usize,
    mask: &[f64],
    atom: impl Fn(usize, f64, f64) -> f64,
) -> Vec<Vec<f64>> {
    const BLOCK: usize = 4096;
    let n = coeffs.nrows();
    let atoms = coeffs.ncols();
    let m = res * res;
    let mut out = vec![vec![0.0; m]; n];
    let mut start = 0;
    while start < m {
        let len = BLOCK.min(m - start);
        let table = DMatrix::from_fn(atoms, len, |a, t| {
            let idx = start + t;
            if mask[idx] == 0.0 {
                return 0.0;
            }
            let (x, y) = texel_xy(idx % res, idx / res, res, res);
            atom(a, x, y)
        });
        let block = coeffs * table;
        for (s, sample) in out.iter_mut().enumerate() {
            for t in 0..len {
                sample[start + t] = mask[start + t] * block[(s, t)];
            }
        }
        start += len;
    }
    out
}

/// Band-limited sinusoid wrinkles. Each dictionary atom is a plane wave
/// `sin(k·p)`/`cos(k·p)`; per-sample amplitudes scale with a recorded age.
fn wrinkles(config: &ScanConfig, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let res = config.uv_resolution;
    let mask = detail_mask(res)?;
    let mut dict = dictionary_rng(seed, SampleKind::StaticDisplacement);
    let waves: Vec<(f64, f64, f64)> = (0..config.wrinkle_atoms)
        .map(|_| {
            let freq = 4.0 * 6f64.powf(dict.random_range(0.0..1.0));
            let angle = if dict.random_bool(0.7) {
                PI / 2.0 + 0.3 * normal(&mut dict)
            } else {
                dict.random_range(0.0..PI)
            };
            let (s, c) = angle.sin_cos();
            let k = TAU * freq;
            (k * c, k * s, (4.0 / freq).sqrt())
        })
        .collect();
    let [lo, hi] = config.static_amplitude;
    let n = config.static_count;
    let mut ages = Vec::with_capacity(n);
    let mut coeffs = DMatrix::zeros(n, 2 * waves.len());
    for s in 0..n {
        let mut rng = stream_rng(seed, SampleKind::StaticDisplacement, s as u64);
        let age: f64 = rng.random_range(0.0..1.0);
        let amp = lo + (hi - lo) * age;
        for (a, w) in waves.iter().enumerate() {
            coeffs[(s, 2 * a)] = amp * w.2 * normal(&mut rng);
            coeffs[(s, 2 * a + 1)] = amp * w.2 * normal(&mut rng);
        }
        ages.push(age);
    }
    let samples = synthesize_fields(&coeffs, res, &mask, |a, x, y| {
        let w = waves[a / 2];
        let phase = w.0 * x + w.1 * y;
        if a % 2 == 0 {
            phase.sin()
        } else {
            phase.cos()
        }
    });
    Ok((samples, ages))
}

const RIDGE_FREQS: [f64; 6] = [8.0, 10.0, 12.5, 15.0, 17.5, 20.0];

/// Ridge fields over the eyebrow and mouth regions. Stretched ridges use a
/// lower frequency band and the opposite phase of compressed ones.
fn ridges(config: &ScanConfig, kind: SampleKind, seed: u64) -> Result<Vec<Vec<f64>>> {
    let res = config.uv_resolution;
    let mask = detail_mask(res)?;
    let (freq_scale, base_phase) = match kind {
        SampleKind::Compressed => (1.0, 0.0),
        _ => (0.6, PI),
    };
    // Regions: brow (horizontal ridges), mouth (vertical), mouth (radial).
    let regions = 3;
    let atoms = regions * RIDGE_FREQS.len() * 2;
    let [lo, hi] = config.dynamic_amplitude;
    let n = config.dynamic_count;
    let mut coeffs = DMatrix::zeros(n, atoms);
    for s in 0..n {
        let mut rng = stream_rng(seed, kind, s as u64);
        for r in 0..regions {
            let amp = rng.random_range(lo..=hi);
            for (f, freq) in RIDGE_FREQS.iter().enumerate() {
                let c = amp * (8.0 / freq).sqrt() * normal(&mut rng).abs();
                let phi = base_phase + 0.3 * normal(&mut rng);
                let col = 2 * (r * RIDGE_FREQS.len() + f);
                coeffs[(s, col)] = c * phi.cos();
                coeffs[(s, col + 1)] = c * phi.sin();
            }
        }
    }
    Ok(synthesize_fields(&coeffs, res, &mask, |a, x, y| {
        let pair = a / 2;
        let (r, f) = (pair / RIDGE_FREQS.len(), pair % RIDGE_FREQS.len());
        let k = TAU * RIDGE_FREQS[f] * freq_scale;
        let (window, phase) = match r {
            0 => {
                let eye_gap = EYE_CENTERS
                    .iter()
                    .map(|&(cx, cy)| 1.0 - gaussian(x, y, cx, cy, 0.12, 0.08))
                    .product::<f64>();
                (band(y, 0.3, 0.7, 0.15) * band(x, -0.75, 0.75, 0.15) * eye_gap, k * y)
            }
            1 => (band(y, -0.8, -0.3, 0.15) * band(x, -0.55, 0.55, 0.15), k * x),
            _ => {
                let d = (x * x + ((y + 0.55) / 0.7).powi(2)).sqrt();
                (band(y, -0.85, -0.25, 0.15) * band(x, -0.6, 0.6, 0.15), k * d)
            }
        };
        window * if a % 2 == 0 { phase.sin() } else { phase.cos() }
    }))
}

//! Loss terms and their weighted total.
//!
//! Every term is non-negative and zero on exact agreement. Masked L2 terms
//! use the unsquared norm unless [`L2Mode::Squared`] is selected.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mesh::{Mesh, UvField};
use crate::morphable::CoefficientSet;
use crate::nn::{log_softmax, softmax};

/// Default weights: detail 10, shape 1, self-supervision 1, identity 0.1,
/// landmark 0.5, distillation 1, regularization 1e-3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_detail: f64,
    pub lambda_shp: f64,
    pub lambda_self: f64,
    pub lambda_id: f64,
    pub lambda_lmk: f64,
    pub lambda_kd: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_detail: 10.0,
            lambda_shp: 1.0,
            lambda_self: 1.0,
            lambda_id: 0.1,
            lambda_lmk: 0.5,
            lambda_kd: 1.0,
            lambda_reg: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_detail,
            self.lambda_shp,
            self.lambda_self,
            self.lambda_id,
            self.lambda_lmk,
            self.lambda_kd,
            self.lambda_reg,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Mode {
    #[default]
    Norm,
    Squared,
}

impl L2Mode {
    fn finish(self, sum_sq: f64) -> f64 {
        match self {
            L2Mode::Norm => sum_sq.sqrt(),
            L2Mode::Squared => sum_sq,
        }
    }
}

fn masked_sum_sq(a: &UvField, b: &UvField, mask: &UvField, what: &'static str) -> Result<f64> {
    a.check_shape(b, what)?;
    if mask.channels() != 1 || mask.width() != a.width() || mask.height() != a.height() {
        return Err(Error::InvalidArgument(format!("{what}: mask must be a single channel of matching size")));
    }
    let ch = a.channels();
    Ok(a.data()
        .chunks_exact(ch)
        .zip(b.data().chunks_exact(ch))
        .zip(mask.data())
        .map(|((x, y), m)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| {
                    let d = m * (p - q);
                    d * d
                })
                .sum::<f64>()
        })
        .sum())
}

/// The three static/compressed/stretched displacement maps of one subject.
#[derive(Debug, Clone, Copy)]
pub struct DetailMaps<'a> {
    pub static_map: &'a UvField,
    pub compressed: &'a UvField,
    pub stretched: &'a UvField,
}

/// Sum of the masked L2 distances of the three displacement maps.
pub fn detail_loss(pred: DetailMaps<'_>, truth: DetailMaps<'_>, mask: &UvField, mode: L2Mode) -> Result<f64> {
    let pairs = [
        (pred.static_map, truth.static_map),
        (pred.compressed, truth.compressed),
        (pred.stretched, truth.stretched),
    ];
    pairs.iter().try_fold(0.0, |acc, (p, t)| {
        Ok(acc + mode.finish(masked_sum_sq(p, t, mask, "detail loss")?))
    })
}

/// Masked L2 distance between vertex sets; `mask` holds per-vertex weights.
pub fn vertex_loss(pred: &Mesh, truth: &Mesh, mask: &[f64], mode: L2Mode) -> Result<f64> {
    check_len("vertex loss positions", truth.positions().len(), pred.positions().len())?;
    check_len("vertex mask", truth.positions().len(), mask.len())?;
    let s: f64 = pred
        .positions()
        .iter()
        .zip(truth.positions())
        .zip(mask)
        .map(|((p, q), m)| ((p - q) * *m).norm_squared())
        .sum();
    Ok(mode.finish(s))
}

/// `KL(softmax(truth) ‖ softmax(pred))` summed over dimensions.
pub fn kl_coeff_loss(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len("kl coefficients", truth.len(), pred.len())?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    let p = softmax(truth);
    let lp = log_softmax(truth);
    let lq = log_softmax(pred);
    let kl: f64 = p
        .iter()
        .zip(lp.iter().zip(&lq))
        .map(|(pi, (a, b))| if *pi == 0.0 { 0.0 } else { pi * (a - b) })
        .sum();
    // Rounding can leave a tiny negative value at equality.
    Ok(kl.max(0.0))
}

/// Masked L2 distance between images; `mask` is one channel.
pub fn photo_loss(image: &UvField, rendered: &UvField, mask: &UvField, mode: L2Mode) -> Result<f64> {
    Ok(mode.finish(masked_sum_sq(image, rendered, mask, "photo loss")?))
}

/// `1 − cos(a, b)`.
pub fn identity_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("embedding", a.len(), b.len())?;
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::Degenerate("zero-norm embedding".into()));
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(1.0 - cos.clamp(-1.0, 1.0))
}

/// A detected 2D landmark in pixels with its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub mu: [f64; 2],
    pub sigma: f64,
}

/// `Σ_i ‖μ_i − μ̂_i‖ / (2σ_i²)`.
pub fn landmark_loss(detected: &[Landmark], projected: &[[f64; 2]]) -> Result<f64> {
    check_len("landmarks", detected.len(), projected.len())?;
    detected.iter().zip(projected).try_fold(0.0, |acc, (d, p)| {
        if !(d.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("landmark sigma {} <= 0", d.sigma)));
        }
        let dist = ((d.mu[0] - p[0]).powi(2) + (d.mu[1] - p[1]).powi(2)).sqrt();
        Ok(acc + dist / (2.0 * d.sigma * d.sigma))
    })
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("{what} is not a probability vector (sum {s})")));
    }
    Ok(())
}

/// `Σ_b teacher_b (log teacher_b − log student_b)`, with `0·log 0 = 0`.
pub fn kd_loss(teacher: &[f64], student: &[f64]) -> Result<f64> {
    check_len("age bins", teacher.len(), student.len())?;
    check_distribution(teacher, "teacher")?;
    check_distribution(student, "student")?;
    let mut acc = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        if *t == 0.0 {
            continue;
        }
        if *s == 0.0 {
            return Err(Error::Degenerate("student assigns zero probability to a teacher bin".into()));
        }
        acc += t * (t.ln() - s.ln());
    }
    Ok(acc.max(0.0))
}

/// Sum of squared norms of α, β, ξ, φ and, when present, φ_com and φ_str.
pub fn reg_loss(c: &CoefficientSet) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    sq(&c.alpha)
        + sq(&c.beta)
        + sq(&c.xi)
        + sq(&c.phi)
        + c.phi_com.as_deref().map_or(0.0, sq)
        + c.phi_str.as_deref().map_or(0.0, sq)
}

/// Raw term values; `None` marks a term whose target is absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub detail: Option<f64>,
    pub vertex: Option<f64>,
    pub kl: Option<f64>,
    pub photo: Option<f64>,
    pub identity: Option<f64>,
    pub landmark: Option<f64>,
    pub kd: Option<f64>,
    pub reg: Option<f64>,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("detail", self.detail),
            ("vertex", self.vertex),
            ("kl", self.kl),
            ("photo", self.photo),
            ("identity", self.identity),
            ("landmark", self.landmark),
            ("kd", self.kd),
            ("reg", self.reg),
        ]
    }
}

/// Weighted total with its grouped contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: LossTerms,
    /// detail, shape, self, kd, reg contributions in summation order.
    pub groups: [(String, f64); 5],
    /// Names of terms whose targets were absent.
    pub missing: Vec<String>,
}

/// `λ_detail L_detail + λ_shp (L_ver + L_kl)
///  + λ_self (L_pho + λ_id L_id + λ_lmk L_lmk) + λ_kd L_kd + λ_reg L_reg`,
/// accumulated left to right so the groups sum to the total exactly.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    for (name, v) in terms.named() {
        if let Some(v) = v {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss = {v}")));
            }
        }
    }
    let z = |o: Option<f64>| o.unwrap_or(0.0);
    let groups = [
        ("detail".to_string(), w.lambda_detail * z(terms.detail)),
        ("shape".to_string(), w.lambda_shp * (z(terms.vertex) + z(terms.kl))),
        (
            "self".to_string(),
            w.lambda_self * (z(terms.photo) + w.lambda_id * z(terms.identity) + w.lambda_lmk * z(terms.landmark)),
        ),
        ("kd".to_string(), w.lambda_kd * z(terms.kd)),
        ("reg".to_string(), w.lambda_reg * z(terms.reg)),
    ];
    let total = groups.iter().fold(0.0, |acc, (_, g)| acc + g);
    let missing = terms
        .named()
        .iter()
        .filter(|(_, v)| v.is_none())
        .map(|(n, _)| n.to_string())
        .collect();
    Ok(LossBreakdown {
        total,
        terms: *terms,
        groups,
        missing,
    })
}

/// Maps an image (optionally masked) to a feature vector for the identity term.
pub trait Embedder: Send + Sync {
    fn embed(&self, image: &UvField, mask: Option<&UvField>) -> Result<Vec<f64>>;
}

/// Average-pooled grayscale of the masked image on a `grid × grid` lattice,
/// flattened and mean-centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PooledEmbedder {
    pub grid: usize,
}

impl Default for PooledEmbedder {
    fn default() -> Self {
        Self { grid: 16 }
    }
}

impl Embedder for PooledEmbedder {
    fn embed(&self, image: &UvField, mask: Option<&UvField>) -> Result<Vec<f64>> {
        let (w, h, ch) = (image.width(), image.height(), image.channels());
        if let Some(m) = mask {
            if m.channels() != 1 || m.width() != w || m.height() != h {
                return Err(Error::InvalidArgument("embedder mask must match the image".into()));
            }
        }
        let g = self.grid;
        if g == 0 || w < g || h < g {
            return Err(Error::InvalidArgument(format!("image {w}x{h} smaller than the {g}x{g} pooling grid")));
        }
        let mut sums = vec![0.0; g * g];
        let mut counts = vec![0usize; g * g];
        for y in 0..h {
            let cy = y * g / h;
            for x in 0..w {
                let cx = x * g / w;
                let m = mask.map_or(1.0, |m| m.get(x, y, 0));
                let gray = (0..ch).map(|c| image.get(x, y, c)).sum::<f64>() / ch as f64;
                sums[cy * g + cx] += m * gray;
                counts[cy * g + cx] += 1;
            }
        }
        let mut feat: Vec<f64> = sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
        let mean = feat.iter().sum::<f64>() / feat.len() as f64;
        feat.iter_mut().for_each(|f| *f -= mean);
        Ok(feat)
    }
}

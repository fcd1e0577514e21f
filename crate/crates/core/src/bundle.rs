//! On-disk model bundle: one directory holding a JSON manifest, the
//! topology, and every basis, skinning array and network as little-endian
//! f32 files.
//!
//! The manifest records a SHA-256 digest per data file; the bundle hash is
//! the digest of the manifest itself, so it changes with any stored value.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::BuildConfig;
use crate::detail::{DetailModel, NetworkShape};
use crate::error::{Error, Result};
use crate::linear::LinearBasis;
use crate::losses::LossWeights;
use crate::mesh::{Topology, TopologyData};
use crate::morphable::{CoefficientSet, ModelDims, MorphableModel, SkinningData};
use crate::nn::{Dense, Mlp};
use crate::render::SH_CONVENTION;

pub const BUNDLE_FORMAT: &str = "sddk-model-bundle";
pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOPOLOGY_FILE: &str = "topology.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    /// Number of f32 values.
    pub values: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dims: ModelDims,
    pub joint_names: Vec<String>,
    pub loss_weights: LossWeights,
    pub scan_seed: u64,
    pub weight_seed: u64,
    pub network: NetworkShape,
    pub sh_convention: String,
    pub vertex_count: usize,
    pub uv_resolution: [usize; 2],
    pub albedo_resolution: [usize; 2],
    /// Generator settings the bundle was built from, when known.
    pub build: Option<BuildConfig>,
    pub files: BTreeMap<String, FileEntry>,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub manifest: Manifest,
    pub morphable: MorphableModel,
    pub detail: DetailModel,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn network_shape(detail: &DetailModel) -> NetworkShape {
    NetworkShape {
        adain_dim: detail.adain().output,
        mlp_hidden: detail.dynamic_mlp().sizes()[1],
        age_hidden: detail.age_head().sizes()[1],
    }
}

fn basis_arrays(prefix: &str, b: &LinearBasis, out: &mut Vec<(String, Vec<f64>)>) {
    out.push((format!("{prefix}.mean.f32"), b.mean().to_vec()));
    out.push((format!("{prefix}.components.f32"), b.components().to_vec()));
    if let Some(s) = b.stddev() {
        out.push((format!("{prefix}.stddev.f32"), s.to_vec()));
    }
}

/// Writes a bundle into `dir` (created if missing) and returns its manifest.
pub fn save_bundle(
    dir: &Path,
    morphable: &MorphableModel,
    detail: &DetailModel,
    scan_seed: u64,
    weight_seed: u64,
    build: Option<&BuildConfig>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut arrays = Vec::new();
    basis_arrays("shape", morphable.shape_basis(), &mut arrays);
    basis_arrays("expression", morphable.expression_basis(), &mut arrays);
    basis_arrays("albedo", morphable.albedo_basis(), &mut arrays);
    basis_arrays("static", detail.static_basis(), &mut arrays);
    basis_arrays("compressed", detail.compressed_basis(), &mut arrays);
    basis_arrays("stretched", detail.stretched_basis(), &mut arrays);
    let skin = morphable.skinning();
    arrays.push(("skinning.weights.f32".into(), skin.weights().to_vec()));
    arrays.push(("skinning.regressor.f32".into(), skin.regressor().to_vec()));
    arrays.push(("skinning.bias.f32".into(), skin.bias().to_vec()));
    let mut adain = Vec::new();
    adain.extend_from_slice(&detail.adain().weights);
    adain.extend_from_slice(&detail.adain().bias);
    arrays.push(("network.adain.f32".into(), adain));
    arrays.push(("network.dynamic.f32".into(), detail.dynamic_mlp().to_flat()));
    arrays.push(("network.age.f32".into(), detail.age_head().to_flat()));

    let mut files = BTreeMap::new();
    for (name, values) in &arrays {
        let bytes = f32_bytes(values);
        let path = dir.join(name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.insert(
            name.clone(),
            FileEntry {
                values: values.len(),
                sha256: sha256_hex(&bytes),
            },
        );
    }
    let topo_text = serde_json::to_string(&morphable.topology().to_data())
        .map_err(|e| Error::json(dir.join(TOPOLOGY_FILE), e))?;
    let topo_path = dir.join(TOPOLOGY_FILE);
    fs::write(&topo_path, &topo_text).map_err(|e| Error::io(&topo_path, e))?;
    files.insert(
        TOPOLOGY_FILE.into(),
        FileEntry {
            values: 0,
            sha256: sha256_hex(topo_text.as_bytes()),
        },
    );

    let (uw, uh) = detail.resolution();
    let (aw, ah) = morphable.albedo_size();
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        dims: ModelDims {
            identity: morphable.identity_dim(),
            expression: morphable.expression_dim(),
            albedo: morphable.albedo_dim(),
            joints: skin.joint_count(),
            static_detail: detail.static_basis().rank(),
            compressed: detail.compressed_basis().rank(),
            stretched: detail.stretched_basis().rank(),
        },
        joint_names: skin.joint_names().to_vec(),
        loss_weights: LossWeights::default(),
        scan_seed,
        weight_seed,
        network: network_shape(detail),
        sh_convention: SH_CONVENTION.into(),
        vertex_count: morphable.topology().vertex_count(),
        uv_resolution: [uw, uh],
        albedo_resolution: [aw, ah],
        build: build.cloned(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Hex SHA-256 of the manifest, which pins every data file by digest.
pub fn bundle_hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

struct Reader<'a> {
    dir: &'a Path,
    manifest: &'a Manifest,
}

impl Reader<'_> {
    fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        let entry = self
            .manifest
            .files
            .get(name)
            .ok_or_else(|| Error::Bundle(format!("manifest does not list {name}")))?;
        let path: PathBuf = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Bundle(format!("{name}: digest mismatch")));
        }
        Ok(bytes)
    }

    fn floats(&self, name: &str, expected: usize) -> Result<Vec<f64>> {
        let bytes = self.bytes(name)?;
        if bytes.len() != expected * 4 || self.manifest.files[name].values != expected {
            return Err(Error::Bundle(format!(
                "{name}: expected {expected} values, found {}",
                bytes.len() / 4
            )));
        }
        let v: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Bundle(format!("{name}: non-finite value")));
        }
        Ok(v)
    }

    fn basis(&self, prefix: &str, dim: usize, rank: usize) -> Result<LinearBasis> {
        let mean = self.floats(&format!("{prefix}.mean.f32"), dim)?;
        let comps = self.floats(&format!("{prefix}.components.f32"), dim * rank)?;
        let sd_name = format!("{prefix}.stddev.f32");
        let sd = if self.manifest.files.contains_key(&sd_name) {
            Some(self.floats(&sd_name, rank)?)
        } else {
            None
        };
        LinearBasis::new(mean, comps, sd).map_err(|e| Error::Bundle(format!("{prefix}: {e}")))
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if m.format != BUNDLE_FORMAT || m.version != BUNDLE_VERSION {
        return Err(Error::Bundle(format!("unsupported format {} v{}", m.format, m.version)));
    }
    if m.sh_convention != SH_CONVENTION {
        return Err(Error::Bundle(format!("unknown SH convention `{}`", m.sh_convention)));
    }
    if m.joint_names.len() != m.dims.joints {
        return Err(Error::Bundle("joint name count differs from dims".into()));
    }
    m.loss_weights.validate()?;
    Ok(m)
}

/// Loads and fully validates a bundle: digests, array sizes, finiteness and
/// model invariants.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let manifest = read_manifest(dir)?;
    let r = Reader {
        dir,
        manifest: &manifest,
    };
    let topo_bytes = r.bytes(TOPOLOGY_FILE)?;
    let data: TopologyData =
        serde_json::from_slice(&topo_bytes).map_err(|e| Error::json(dir.join(TOPOLOGY_FILE), e))?;
    let topology = Arc::new(Topology::from_data(data)?);
    let nv = topology.vertex_count();
    if nv != manifest.vertex_count {
        return Err(Error::Bundle(format!(
            "topology has {nv} vertices, manifest says {}",
            manifest.vertex_count
        )));
    }
    let d = manifest.dims;
    let [aw, ah] = manifest.albedo_resolution;
    let [uw, uh] = manifest.uv_resolution;
    let shape = r.basis("shape", 3 * nv, d.identity)?;
    let expression = r.basis("expression", 3 * nv, d.expression)?;
    let albedo = r.basis("albedo", aw * ah * 3, d.albedo)?;
    let j = d.joints;
    let skinning = SkinningData::new(
        manifest.joint_names.clone(),
        r.floats("skinning.weights.f32", j * nv)?,
        r.floats("skinning.regressor.f32", 3 * j * d.identity)?,
        r.floats("skinning.bias.f32", 3 * j)?,
        nv,
        d.identity,
    )
    .map_err(|e| Error::Bundle(format!("skinning: {e}")))?;
    let morphable = MorphableModel::new(topology, shape, expression, albedo, (aw, ah), skinning)?;

    let texels = uw * uh;
    let static_basis = r.basis("static", texels, d.static_detail)?;
    let compressed = r.basis("compressed", texels, d.compressed)?;
    let stretched = r.basis("stretched", texels, d.stretched)?;
    let net = manifest.network;
    let a = r.floats("network.adain.f32", d.expression * net.adain_dim + net.adain_dim)?;
    let split = d.expression * net.adain_dim;
    let adain = Dense::new(d.expression, net.adain_dim, a[..split].to_vec(), a[split..].to_vec())?;
    let dyn_sizes = [d.static_detail, net.mlp_hidden, net.mlp_hidden, d.compressed + d.stretched];
    let age_sizes = [d.static_detail, net.age_hidden, net.age_hidden, crate::detail::AGE_BINS];
    let count = |s: &[usize]| s.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
    let dynamic = Mlp::from_flat(&dyn_sizes, &r.floats("network.dynamic.f32", count(&dyn_sizes))?)?;
    let age = Mlp::from_flat(&age_sizes, &r.floats("network.age.f32", count(&age_sizes))?)?;
    let detail = DetailModel::new((uw, uh), static_basis, compressed, stretched, adain, dynamic, age)?;
    Ok(ModelBundle {
        manifest,
        morphable,
        detail,
    })
}

/// Reads a coefficient set and checks it against `dims`.
pub fn load_coefficients(path: &Path, dims: &ModelDims) -> Result<CoefficientSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let c: CoefficientSet = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    c.validate(dims)?;
    Ok(c)
}

pub fn save_coefficients(path: &Path, c: &CoefficientSet) -> Result<()> {
    let text = serde_json::to_string_pretty(c).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

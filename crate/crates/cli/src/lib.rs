//! Command-line front end: model building, synthesis, fitting, animation
//! transfer, tension diagnostics and rendering.
//!
//! Every command returns a [`Report`] holding a JSON summary and a human
//! readable text form. Failures map to exit code 2 (usage or validation)
//! or 3 (numerical).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Deserialize;
use serde_json::{json, Value};

use sddk_core::basis::{build_bundle_models, BuildConfig};
use sddk_core::bundle::{bundle_hash, load_bundle, load_coefficients, save_bundle, save_coefficients, ModelBundle};
use sddk_core::detail::{run_sd_detail, tension_uv_map, vertex_tension, AdainForm, DetailOptions};
use sddk_core::fit::{fit_coefficients, parse_blocks, trace_csv, FitModels, FitOptions, FitTarget};
use sddk_core::losses::{L2Mode, Landmark, PooledEmbedder};
use sddk_core::mesh::{load_obj, save_obj, FieldKind, Mesh, UvField};
use sddk_core::morphable::CoefficientSet;
use sddk_core::render::{render_coefficients, Camera};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<sddk_core::Error> for CliError {
    fn from(e: sddk_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "sddk", version, about = "Parametric face model with static and dynamic displacement detail")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Model bundle directory.
    #[arg(long, global = true, env = "SDDK_MODEL")]
    pub model: Option<PathBuf>,
    /// Print a JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Use standard AdaIN (scale then shift) for the dynamic coefficients.
    #[arg(long, global = true)]
    pub adain_standard: bool,
    /// Do not clamp the tension map before interpolation.
    #[arg(long, global = true)]
    pub unclamped_tension: bool,
    /// Use squared L2 norms in the detail, vertex and photometric losses.
    #[arg(long, global = true)]
    pub squared_l2: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnimateMode {
    /// Replace the static detail coefficients.
    Static,
    /// Replace the expression coefficients.
    Dynamic,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scans, fit every basis and write a model bundle.
    BuildBasis {
        /// Bundle directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Generator configuration JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scan generator seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Network weight seed; overrides the config.
        #[arg(long)]
        weight_seed: Option<u64>,
    },
    /// Synthesize coarse and detailed meshes plus displacement and tension maps.
    Synthesize {
        /// Coefficient JSON.
        #[arg(long)]
        coeffs: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also render the posed coarse mesh.
        #[arg(long)]
        render: bool,
        /// Render width in pixels.
        #[arg(long, default_value_t = 256)]
        width: usize,
        /// Render height in pixels.
        #[arg(long, default_value_t = 256)]
        height: usize,
    },
    /// Fit coefficients to a target by analysis-by-synthesis.
    Fit {
        /// Target JSON; relative paths resolve against its directory.
        #[arg(long)]
        target: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Initial coefficients; zeros when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Optimizer options JSON; omitted fields take defaults.
        #[arg(long)]
        options: Option<PathBuf>,
        /// Comma-separated blocks to optimize (beta, xi, alpha, gamma, pose, phi).
        #[arg(long)]
        blocks: Option<String>,
        /// Overrides the iteration cap from the options.
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Seed of the finite-difference coordinate sampling.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Transfer detail between subjects by swapping coefficient blocks.
    Animate {
        /// Coefficients of the subject being animated.
        #[arg(long)]
        source: PathBuf,
        /// Coefficients supplying the swapped blocks.
        #[arg(long)]
        driving: PathBuf,
        #[arg(long, value_enum)]
        mode: AnimateMode,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-vertex tension between a neutral and a deformed shape.
    Tension {
        /// Coefficient JSON or OBJ.
        #[arg(long)]
        neutral: PathBuf,
        /// Coefficient JSON or OBJ.
        #[arg(long)]
        deformed: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Square tension-map resolution; the bundle's UV resolution by default.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Render the posed coarse mesh to a PNG.
    Render {
        /// Coefficient JSON.
        #[arg(long)]
        coeffs: PathBuf,
        /// PNG path.
        #[arg(long)]
        out: PathBuf,
        /// Image width in pixels.
        #[arg(long, default_value_t = 256)]
        width: usize,
        /// Image height in pixels.
        #[arg(long, default_value_t = 256)]
        height: usize,
    },
}

/// Result of one command.
#[derive(Debug, Clone)]
pub struct Report {
    pub json: Value,
    pub text: String,
}

/// Runs a parsed command, honoring `--threads`.
pub fn run(cli: &Cli) -> CliResult<Report> {
    match cli.global.threads {
        Some(0) => Err(usage("--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| usage(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli))
        }
        None => dispatch(cli),
    }
}

fn dispatch(cli: &Cli) -> CliResult<Report> {
    let g = &cli.global;
    match &cli.command {
        Command::BuildBasis {
            out,
            config,
            seed,
            weight_seed,
        } => cmd_build_basis(out, config.as_deref(), *seed, *weight_seed),
        Command::Synthesize {
            coeffs,
            out,
            render,
            width,
            height,
        } => cmd_synthesize(g, coeffs, out, render.then_some((*width, *height))),
        Command::Fit {
            target,
            out,
            init,
            options,
            blocks,
            max_iterations,
            seed,
        } => cmd_fit(
            g,
            target,
            out,
            init.as_deref(),
            options.as_deref(),
            blocks.as_deref(),
            *max_iterations,
            *seed,
        ),
        Command::Animate {
            source,
            driving,
            mode,
            out,
        } => cmd_animate(g, source, driving, *mode, out),
        Command::Tension {
            neutral,
            deformed,
            out,
            resolution,
        } => cmd_tension(g, neutral, deformed, out, *resolution),
        Command::Render {
            coeffs,
            out,
            width,
            height,
        } => cmd_render(g, coeffs, out, *width, *height),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn make_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

/// Loads the bundle named by `--model`/`SDDK_MODEL` and applies detail flags.
pub fn load_model(g: &GlobalArgs) -> CliResult<ModelBundle> {
    let dir = g
        .model
        .as_ref()
        .ok_or_else(|| usage("no model bundle: pass --model or set SDDK_MODEL"))?;
    let mut b = load_bundle(dir)?;
    b.detail.set_options(detail_options(g));
    Ok(b)
}

pub fn detail_options(g: &GlobalArgs) -> DetailOptions {
    let mut o = DetailOptions::default();
    if g.adain_standard {
        o.adain_form = AdainForm::Standard;
    }
    if g.unclamped_tension {
        o.tension_clamp = None;
    }
    o
}

fn cmd_build_basis(out: &Path, config: Option<&Path>, seed: Option<u64>, weight_seed: Option<u64>) -> CliResult<Report> {
    let mut cfg: BuildConfig = match config {
        Some(p) => read_json(p)?,
        None => BuildConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = weight_seed {
        cfg.weight_seed = s;
    }
    cfg.validate()?;
    let (morphable, detail, report) = build_bundle_models(&cfg)?;
    save_bundle(out, &morphable, &detail, cfg.seed, cfg.weight_seed, Some(&cfg))?;
    // Self-validation: the written bundle must load back.
    load_bundle(out)?;
    let hash = bundle_hash(out)?;
    let mut text = format!("{:<20} {:>8} {:>10} {:>12}\n", "basis", "samples", "components", "explained");
    let mut rows = Vec::new();
    for (kind, k, r) in &report.spectra {
        let explained = r.explained(*k);
        text += &format!(
            "{:<20} {:>8} {:>10} {:>11.4}%\n",
            serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            r.samples,
            k,
            100.0 * explained
        );
        rows.push(json!({"kind": kind, "samples": r.samples, "components": k, "explained": explained}));
    }
    text += &format!("bundle {} sha256 {hash}\n", out.display());
    info!("wrote bundle {}", out.display());
    Ok(Report {
        json: json!({"command": "build-basis", "bundle": out, "hash": hash, "variance": rows}),
        text,
    })
}

fn write_detail_outputs(
    out: &Path,
    detail: &sddk_core::detail::DetailOutput,
    files: &mut Vec<String>,
) -> CliResult<()> {
    save_obj(&detail.coarse, &out.join("coarse.obj"))?;
    save_obj(&detail.detailed, &out.join("detailed.obj"))?;
    detail
        .displacement
        .save_with_png(&out.join("displacement.f32"), &out.join("displacement.png"))?;
    detail
        .tension_map
        .save_with_png(&out.join("tension.f32"), &out.join("tension.png"))?;
    detail.static_map.save_raw(&out.join("static.f32"))?;
    for name in [
        "coarse.obj",
        "detailed.obj",
        "displacement.f32",
        "displacement.f32.json",
        "displacement.png",
        "tension.f32",
        "tension.f32.json",
        "tension.png",
        "static.f32",
        "static.f32.json",
    ] {
        files.push(name.to_owned());
    }
    Ok(())
}

fn cmd_synthesize(g: &GlobalArgs, coeffs: &Path, out: &Path, render: Option<(usize, usize)>) -> CliResult<Report> {
    let b = load_model(g)?;
    let c = load_coefficients(coeffs, &b.manifest.dims)?;
    let detail = run_sd_detail(&c, &b.morphable, &b.detail)?;
    make_dir(out)?;
    let mut files = Vec::new();
    write_detail_outputs(out, &detail, &mut files)?;
    if let Some((w, h)) = render {
        let cam = Camera::framing_patch(w, h)?;
        let r = render_coefficients(&b.morphable, &c, &cam)?;
        r.image.write_png8(&out.join("render.png"))?;
        files.push("render.png".into());
    }
    let (lo, hi) = detail.tension_map.min_max();
    let text = format!(
        "wrote {} files to {}\ntension range [{lo:.6}, {hi:.6}], dynamic branch {}\n",
        files.len(),
        out.display(),
        if detail.dynamic_coeffs.is_some() { "active" } else { "skipped" }
    );
    Ok(Report {
        json: json!({
            "command": "synthesize",
            "out": out,
            "files": files,
            "tension_min": lo,
            "tension_max": hi,
            "dynamic_active": detail.dynamic_coeffs.is_some(),
        }),
        text,
    })
}

/// Fit target as stored on disk. Relative paths resolve against the target
/// file's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetFile {
    pub camera: Option<Camera>,
    pub landmarks: Option<Vec<Landmark>>,
    pub landmarks_file: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub truth_coefficients: Option<PathBuf>,
    pub truth_vertices: Option<PathBuf>,
    pub truth_detail: Option<[PathBuf; 3]>,
    pub teacher_age: Option<Vec<f64>>,
}

fn load_field(path: &Path, kind: FieldKind) -> CliResult<UvField> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let f = if is_png {
        UvField::load_png(path, kind)?
    } else {
        UvField::load_raw(path)?
    };
    Ok(f)
}

fn resolve_target(path: &Path, b: &ModelBundle) -> CliResult<FitTarget> {
    let t: TargetFile = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &PathBuf| -> PathBuf {
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    };
    let landmarks = match (&t.landmarks, &t.landmarks_file) {
        (Some(_), Some(_)) => return Err(usage("give either landmarks or landmarks_file, not both")),
        (Some(l), None) => l.clone(),
        (None, Some(f)) => {
            let f = rel(f);
            if !f.exists() {
                return Err(usage(format!("landmark file {} does not exist", f.display())));
            }
            read_json(&f)?
        }
        (None, None) => Vec::new(),
    };
    let image = t.image.as_ref().map(|p| load_field(&rel(p), FieldKind::Image)).transpose()?;
    let mask = t.mask.as_ref().map(|p| load_field(&rel(p), FieldKind::Mask)).transpose()?;
    let camera = match (t.camera, &image) {
        (Some(c), _) => c,
        (None, Some(img)) => Camera::framing_patch(img.width(), img.height())?,
        (None, None) => Camera::framing_patch(256, 256)?,
    };
    let truth_beta = match &t.truth_coefficients {
        Some(p) => Some(load_coefficients(&rel(p), &b.manifest.dims)?.beta),
        None => None,
    };
    let truth_vertices = t.truth_vertices.as_ref().map(|p| load_obj(&rel(p))).transpose()?;
    let truth_detail = match &t.truth_detail {
        Some(ps) => Some([
            load_field(&rel(&ps[0]), FieldKind::Displacement)?,
            load_field(&rel(&ps[1]), FieldKind::Displacement)?,
            load_field(&rel(&ps[2]), FieldKind::Displacement)?,
        ]),
        None => None,
    };
    Ok(FitTarget {
        camera,
        landmarks,
        image,
        mask,
        truth_beta,
        truth_vertices,
        truth_detail,
        teacher_age: t.teacher_age,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    g: &GlobalArgs,
    target: &Path,
    out: &Path,
    init: Option<&Path>,
    options: Option<&Path>,
    blocks: Option<&str>,
    max_iterations: Option<usize>,
    seed: Option<u64>,
) -> CliResult<Report> {
    let b = load_model(g)?;
    let target = resolve_target(target, &b)?;
    let init = match init {
        Some(p) => load_coefficients(p, &b.manifest.dims)?,
        None => CoefficientSet::zeros(&b.manifest.dims),
    };
    let mut opts: FitOptions = match options {
        Some(p) => read_json(p)?,
        None => FitOptions {
            weights: b.manifest.loss_weights,
            ..FitOptions::default()
        },
    };
    if let Some(s) = blocks {
        opts.blocks = parse_blocks(s)?;
    }
    if let Some(n) = max_iterations {
        opts.max_iterations = n;
    }
    if let Some(s) = seed {
        opts.seed = s;
    }
    if g.squared_l2 {
        opts.l2 = L2Mode::Squared;
    }
    let embedder = PooledEmbedder::default();
    let result = fit_coefficients(
        FitModels {
            morphable: &b.morphable,
            detail: Some(&b.detail),
            embedder: &embedder,
        },
        &target,
        &init,
        &opts,
    )?;
    make_dir(out)?;
    save_coefficients(&out.join("coefficients.json"), &result.coefficients)?;
    write_text(&out.join("trace.csv"), &trace_csv(&result.trace))?;
    let render = render_coefficients(&b.morphable, &result.coefficients, &target.camera)?;
    render.image.write_png8(&out.join("render.png"))?;
    let text = format!(
        "loss {:.6e} -> {:.6e} after {} iterations ({:?})\n",
        result.initial.total, result.final_loss.total, result.iterations, result.stop
    );
    Ok(Report {
        json: json!({
            "command": "fit",
            "out": out,
            "initial_loss": result.initial.total,
            "final_loss": result.final_loss.total,
            "initial_landmark_loss": result.initial.terms.landmark,
            "final_landmark_loss": result.final_loss.terms.landmark,
            "groups": result.final_loss.groups,
            "iterations": result.iterations,
            "stop": result.stop,
        }),
        text,
    })
}

/// Source coefficients with the blocks selected by `mode` taken from
/// `driving`. Derived dynamic coefficients are dropped.
pub fn transfer(source: &CoefficientSet, driving: &CoefficientSet, mode: AnimateMode) -> CoefficientSet {
    let mut out = source.clone();
    if matches!(mode, AnimateMode::Static | AnimateMode::Both) {
        out.phi = driving.phi.clone();
    }
    if matches!(mode, AnimateMode::Dynamic | AnimateMode::Both) {
        out.xi = driving.xi.clone();
    }
    out.phi_com = None;
    out.phi_str = None;
    out
}

fn cmd_animate(g: &GlobalArgs, source: &Path, driving: &Path, mode: AnimateMode, out: &Path) -> CliResult<Report> {
    let b = load_model(g)?;
    let src = load_coefficients(source, &b.manifest.dims)?;
    let drv = load_coefficients(driving, &b.manifest.dims)?;
    let c = transfer(&src, &drv, mode);
    let detail = run_sd_detail(&c, &b.morphable, &b.detail)?;
    make_dir(out)?;
    save_coefficients(&out.join("coefficients.json"), &c)?;
    let mut files = vec!["coefficients.json".to_owned()];
    write_detail_outputs(out, &detail, &mut files)?;
    Ok(Report {
        json: json!({"command": "animate", "mode": format!("{mode:?}").to_lowercase(), "out": out, "files": files}),
        text: format!("wrote {} files to {}\n", files.len(), out.display()),
    })
}

fn is_obj(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj"))
}

fn tension_inputs(g: &GlobalArgs, neutral: &Path, deformed: &Path) -> CliResult<(Mesh, Mesh, Option<ModelBundle>)> {
    match (is_obj(neutral), is_obj(deformed)) {
        (true, true) => Ok((load_obj(neutral)?, load_obj(deformed)?, None)),
        (false, false) => {
            let b = load_model(g)?;
            let a = load_coefficients(neutral, &b.manifest.dims)?;
            let d = load_coefficients(deformed, &b.manifest.dims)?;
            let (_, n) = b.morphable.synthesize_shape(&a.beta, &a.xi)?;
            let (_, m) = b.morphable.synthesize_shape(&d.beta, &d.xi)?;
            Ok((n, m, Some(b)))
        }
        _ => Err(usage("neutral and deformed inputs must both be OBJ or both be coefficient JSON")),
    }
}

/// Tension CSV with one `vertex,tension` row per vertex, values printed
/// as shortest round-trip decimals.
pub fn tension_csv(t: &[f64]) -> String {
    let mut s = String::from("vertex,tension\n");
    for (i, v) in t.iter().enumerate() {
        s += &format!("{i},{v}\n");
    }
    s
}

fn cmd_tension(g: &GlobalArgs, neutral: &Path, deformed: &Path, out: &Path, resolution: Option<usize>) -> CliResult<Report> {
    let (n, d, bundle) = tension_inputs(g, neutral, deformed)?;
    let t = vertex_tension(&d, &n)?;
    let res = match (resolution, &bundle) {
        (Some(0), _) => return Err(usage("--resolution must be positive")),
        (Some(r), _) => (r, r),
        (None, Some(b)) => b.detail.resolution(),
        (None, None) => (256, 256),
    };
    let map = tension_uv_map(&t, n.topology(), res)?;
    make_dir(out)?;
    write_text(&out.join("tension.csv"), &tension_csv(&t))?;
    map.save_with_png(&out.join("tension.f32"), &out.join("tension.png"))?;
    let (lo, hi) = t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Ok(Report {
        json: json!({"command": "tension", "out": out, "vertices": t.len(), "min": lo, "max": hi}),
        text: format!("{} vertices, tension range [{lo:.6}, {hi:.6}]\n", t.len()),
    })
}

fn cmd_render(g: &GlobalArgs, coeffs: &Path, out: &Path, width: usize, height: usize) -> CliResult<Report> {
    let b = load_model(g)?;
    let c = load_coefficients(coeffs, &b.manifest.dims)?;
    let cam = Camera::framing_patch(width, height)?;
    let r = render_coefficients(&b.morphable, &c, &cam)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(dir)?;
    }
    r.image.write_png8(out)?;
    let covered = r.coverage.iter().filter(|&&c| c).count();
    let fraction = covered as f64 / (width * height) as f64;
    Ok(Report {
        json: json!({"command": "render", "out": out, "coverage": fraction}),
        text: format!("wrote {} ({:.1}% covered)\n", out.display(), 100.0 * fraction),
    })
}

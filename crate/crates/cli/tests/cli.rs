use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use sddk_cli::tension_csv;
use sddk_core::bundle::{load_bundle, save_coefficients, ModelBundle};
use sddk_core::detail::{run_sd_detail, vertex_tension};
use sddk_core::fit::synthesize_landmarks;
use sddk_core::mesh::{face_patch, load_obj, save_obj, UvField};
use sddk_core::morphable::CoefficientSet;
use sddk_core::render::Camera;

const SMALL_CONFIG: &str = r#"{
  "dims": {"identity": 8, "expression": 6, "albedo": 4, "joints": 4,
           "static": 10, "compressed": 4, "stretched": 4},
  "network": {"adain_dim": 16, "mlp_hidden": 32, "age_hidden": 16},
  "scans": {"uv_resolution": 32, "albedo_resolution": 16, "shape_count": 16,
            "expression_count": 16, "albedo_count": 8, "static_count": 16,
            "dynamic_count": 12, "wrinkle_atoms": 16}
}"#;

fn sddk() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sddk"));
    c.env_remove("SDDK_MODEL");
    c
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn build(out: &Path, config: &Path, seed: &str) -> Output {
    sddk()
        .args(["--json", "build-basis", "--seed", seed, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

/// One small bundle shared by every test in this binary.
fn bundle() -> &'static (PathBuf, ModelBundle) {
    static B: OnceLock<(PathBuf, ModelBundle)> = OnceLock::new();
    B.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let cfg = write_config(&dir, SMALL_CONFIG);
        let out = dir.join("bundle");
        let o = build(&out, &cfg, "0");
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let b = load_bundle(&out).unwrap();
        (out, b)
    })
}

fn with_model(cmd: &mut Command) -> &mut Command {
    cmd.arg("--model").arg(&bundle().0)
}

fn json_of(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn random_coefficients(seed: u64) -> CoefficientSet {
    let b = &bundle().1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = CoefficientSet::zeros(&b.manifest.dims);
    let mut n = |s: f64| s * rng.random_range(-1.0..1.0);
    c.beta.iter_mut().for_each(|x| *x = n(1.0));
    c.xi.iter_mut().for_each(|x| *x = n(1.0));
    c.alpha.iter_mut().for_each(|x| *x = n(1.0));
    c.phi.iter_mut().for_each(|x| *x = n(0.01));
    c.pose.theta.iter_mut().flatten().for_each(|x| *x = n(0.1));
    c.pose.translation = [n(0.05), n(0.05), 0.0];
    c
}

fn coeff_file(dir: &Path, name: &str, c: &CoefficientSet) -> PathBuf {
    let p = dir.join(name);
    save_coefficients(&p, c).unwrap();
    p
}

fn synthesize(dir: &Path, coeffs: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(out);
    let o = with_model(&mut sddk())
        .args(extra)
        .args(["synthesize", "--coeffs"])
        .arg(coeffs)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn build_basis_is_deterministic_per_seed() {
    let d = tmp();
    let cfg = write_config(d.path(), SMALL_CONFIG);
    let a = json_of(&build(&d.path().join("a"), &cfg, "0"));
    let b = json_of(&build(&d.path().join("b"), &cfg, "0"));
    let c = json_of(&build(&d.path().join("c"), &cfg, "1"));
    assert_eq!(a["hash"], b["hash"]);
    assert_ne!(a["hash"], c["hash"]);
    assert_eq!(a["variance"].as_array().unwrap().len(), 6);
}

#[test]
fn build_basis_prints_variance_table() {
    let d = tmp();
    let cfg = write_config(d.path(), SMALL_CONFIG);
    let o = sddk()
        .args(["build-basis", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(d.path().join("b"))
        .output()
        .unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("static-displacement"));
    assert!(text.contains("explained"));
}

#[test]
fn too_many_components_is_a_usage_error() {
    let d = tmp();
    let cfg = write_config(d.path(), &SMALL_CONFIG.replace("\"static\": 10", "\"static\": 16"));
    let o = build(&d.path().join("b"), &cfg, "0");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_coefficients_give_the_mean_mesh() {
    let d = tmp();
    let b = &bundle().1;
    let p = coeff_file(d.path(), "z.json", &CoefficientSet::zeros(&b.manifest.dims));
    let out = synthesize(d.path(), &p, "s", &[]);
    let coarse = load_obj(&out.join("coarse.obj")).unwrap();
    for (p, q) in coarse.positions().iter().zip(b.morphable.mean_mesh().positions()) {
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() <= 5e-9 * q[k].abs() + 1e-15);
        }
    }
}

#[test]
fn neutral_expression_exports_zero_tension_map() {
    let d = tmp();
    let mut c = random_coefficients(1);
    c.xi.iter_mut().for_each(|x| *x = 0.0);
    let p = coeff_file(d.path(), "c.json", &c);
    let out = synthesize(d.path(), &p, "s", &[]);
    let m = UvField::load_raw(&out.join("tension.f32")).unwrap();
    assert!(m.data().iter().all(|&v| v == 0.0));
}

#[test]
fn synthesize_matches_library_calls() {
    let d = tmp();
    let (_, b) = bundle();
    let c = random_coefficients(2);
    let p = coeff_file(d.path(), "c.json", &c);
    let out = synthesize(d.path(), &p, "s", &[]);
    let lib = run_sd_detail(&c, &b.morphable, &b.detail).unwrap();
    save_obj(&lib.detailed, &d.path().join("lib.obj")).unwrap();
    assert_eq!(fs::read(out.join("detailed.obj")).unwrap(), fs::read(d.path().join("lib.obj")).unwrap());
    let disp = UvField::load_raw(&out.join("displacement.f32")).unwrap();
    let expect: Vec<f64> = lib.displacement.data().iter().map(|&x| x as f32 as f64).collect();
    assert_eq!(disp.data(), expect.as_slice());
}

#[test]
fn adain_flag_changes_dynamic_detail() {
    let d = tmp();
    let p = coeff_file(d.path(), "c.json", &random_coefficients(3));
    let a = synthesize(d.path(), &p, "a", &[]);
    let b = synthesize(d.path(), &p, "b", &["--adain-standard"]);
    let static_a = fs::read(a.join("static.f32")).unwrap();
    assert_eq!(static_a, fs::read(b.join("static.f32")).unwrap());
    assert_ne!(
        fs::read(a.join("displacement.f32")).unwrap(),
        fs::read(b.join("displacement.f32")).unwrap()
    );
}

fn fit_cmd(dir: &Path, target: &Path, extra: &[&str]) -> Output {
    with_model(&mut sddk())
        .args(["--json", "fit", "--target"])
        .arg(target)
        .arg("--out")
        .arg(dir.join("fit"))
        .args(extra)
        .output()
        .unwrap()
}

fn landmark_target(dir: &Path, truth: &CoefficientSet) -> PathBuf {
    let b = &bundle().1;
    let cam = Camera::framing_patch(256, 256).unwrap();
    let lms = synthesize_landmarks(&b.morphable, truth, &cam, 1.0).unwrap();
    let p = dir.join("target.json");
    let t = serde_json::json!({"camera": cam, "landmarks": lms});
    fs::write(&p, t.to_string()).unwrap();
    p
}

#[test]
fn fit_self_generated_target() {
    let d = tmp();
    let target = landmark_target(d.path(), &random_coefficients(4));
    let opts = d.path().join("opts.json");
    fs::write(&opts, r#"{"weights": {"lambda_reg": 0.0}, "max_iterations": 300}"#).unwrap();
    let s = json_of(&fit_cmd(d.path(), &target, &["--options", opts.to_str().unwrap()]));
    let final_lmk = s["final_landmark_loss"].as_f64().unwrap();
    assert!(final_lmk < 1e-3, "final landmark loss {final_lmk}");
    let trace = fs::read_to_string(d.path().join("fit/trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,loss,step,grad_norm,accepted"));
    assert!(d.path().join("fit/render.png").exists());
}

#[test]
fn fit_missing_landmark_file_is_a_usage_error() {
    let d = tmp();
    let t = d.path().join("t.json");
    fs::write(&t, r#"{"landmarks_file": "absent.json"}"#).unwrap();
    assert_eq!(fit_cmd(d.path(), &t, &[]).status.code(), Some(2));
}

#[test]
fn fit_blocks_freeze_the_rest() {
    let d = tmp();
    let target = landmark_target(d.path(), &random_coefficients(5));
    let init = random_coefficients(6);
    let pi = coeff_file(d.path(), "init.json", &init);
    let o = fit_cmd(
        d.path(),
        &target,
        &["--blocks", "beta,xi", "--max-iterations", "5", "--init", pi.to_str().unwrap()],
    );
    json_of(&o);
    let text = fs::read_to_string(d.path().join("fit/coefficients.json")).unwrap();
    let fitted: CoefficientSet = serde_json::from_str(&text).unwrap();
    assert_eq!(fitted.alpha, init.alpha);
    assert_eq!(fitted.gamma, init.gamma);
    assert_eq!(fitted.pose, init.pose);
    assert_eq!(fitted.phi, init.phi);
    assert_ne!(fitted.beta, init.beta);
}

fn animate(dir: &Path, src: &Path, drv: &Path, mode: &str) -> PathBuf {
    let out = dir.join(format!("anim-{mode}"));
    let o = with_model(&mut sddk())
        .args(["animate", "--mode", mode, "--source"])
        .arg(src)
        .arg("--driving")
        .arg(drv)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn self_transfer_reproduces_source() {
    let d = tmp();
    let p = coeff_file(d.path(), "s.json", &random_coefficients(7));
    let s = synthesize(d.path(), &p, "s", &[]);
    let a = animate(d.path(), &p, &p, "both");
    for f in ["coarse.obj", "detailed.obj", "displacement.f32", "static.f32"] {
        assert_eq!(fs::read(s.join(f)).unwrap(), fs::read(a.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn static_transfer_takes_driving_static_map() {
    let d = tmp();
    let ps = coeff_file(d.path(), "s.json", &random_coefficients(8));
    let pd = coeff_file(d.path(), "d.json", &random_coefficients(9));
    let drv = synthesize(d.path(), &pd, "d", &[]);
    let a = animate(d.path(), &ps, &pd, "static");
    assert_eq!(fs::read(drv.join("static.f32")).unwrap(), fs::read(a.join("static.f32")).unwrap());
}

#[test]
fn animate_rejects_foreign_coefficients() {
    let d = tmp();
    let mut c = random_coefficients(10);
    c.beta.push(0.0);
    let bad = coeff_file(d.path(), "bad.json", &c);
    let good = coeff_file(d.path(), "good.json", &random_coefficients(11));
    let o = with_model(&mut sddk())
        .args(["animate", "--mode", "dynamic", "--source"])
        .arg(&good)
        .arg("--driving")
        .arg(&bad)
        .arg("--out")
        .arg(d.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

fn tension(dir: &Path, a: &Path, b: &Path) -> Output {
    with_model(&mut sddk())
        .args(["tension", "--resolution", "16", "--neutral"])
        .arg(a)
        .arg("--deformed")
        .arg(b)
        .arg("--out")
        .arg(dir.join("t"))
        .output()
        .unwrap()
}

fn csv_values(dir: &Path) -> Vec<f64> {
    fs::read_to_string(dir.join("t/tension.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn tension_of_identical_inputs_is_zero() {
    let d = tmp();
    let p = coeff_file(d.path(), "c.json", &random_coefficients(12));
    assert!(tension(d.path(), &p, &p).status.success());
    assert!(csv_values(d.path()).iter().all(|&t| t == 0.0));
}

#[test]
fn tension_of_scaled_obj_pair_is_one_minus_scale() {
    let d = tmp();
    let mesh = face_patch();
    let mut big = mesh.clone();
    for p in big.positions_mut() {
        *p *= 2.0;
    }
    save_obj(&mesh, &d.path().join("a.obj")).unwrap();
    save_obj(&big, &d.path().join("b.obj")).unwrap();
    let o = tension(d.path(), &d.path().join("a.obj"), &d.path().join("b.obj"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // OBJ stores nine significant digits.
    for t in csv_values(d.path()) {
        assert!((t + 1.0).abs() < 1e-7, "{t}");
    }
}

#[test]
fn tension_matches_library_call_exactly() {
    let d = tmp();
    let b = &bundle().1;
    let (ca, cb) = (random_coefficients(13), random_coefficients(14));
    let pa = coeff_file(d.path(), "a.json", &ca);
    let pb = coeff_file(d.path(), "b.json", &cb);
    assert!(tension(d.path(), &pa, &pb).status.success());
    let (_, n) = b.morphable.synthesize_shape(&ca.beta, &ca.xi).unwrap();
    let (_, m) = b.morphable.synthesize_shape(&cb.beta, &cb.xi).unwrap();
    let lib = tension_csv(&vertex_tension(&m, &n).unwrap());
    assert_eq!(fs::read_to_string(d.path().join("t/tension.csv")).unwrap(), lib);
}

#[test]
fn zero_length_edge_is_a_numerical_failure() {
    let d = tmp();
    let a = d.path().join("a.obj");
    fs::write(&a, "v 0 0 0\nv 0 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n").unwrap();
    let o = tension(d.path(), &a, &a);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_model_is_a_usage_error() {
    let d = tmp();
    let p = coeff_file(d.path(), "c.json", &random_coefficients(15));
    let o = sddk()
        .args(["render", "--coeffs"])
        .arg(&p)
        .arg("--out")
        .arg(d.path().join("r.png"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn model_path_comes_from_environment() {
    let d = tmp();
    let p = coeff_file(d.path(), "c.json", &random_coefficients(16));
    let out = d.path().join("r.png");
    let o = sddk()
        .env("SDDK_MODEL", &bundle().0)
        .args(["--json", "render", "--width", "64", "--height", "48", "--coeffs"])
        .arg(&p)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    let s = json_of(&o);
    assert!(s["coverage"].as_f64().unwrap() > 0.3);
    assert_eq!(&fs::read(&out).unwrap()[..8], b"\x89PNG\r\n\x1a\n");
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let o = sddk().args(["synthesize"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let d = tmp();
    let p = coeff_file(d.path(), "c.json", &random_coefficients(17));
    let o = with_model(&mut sddk())
        .args(["--threads", "0", "render", "--coeffs"])
        .arg(&p)
        .arg("--out")
        .arg(d.path().join("r.png"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

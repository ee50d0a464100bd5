use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use arapreg_core::toolkit::{GradcheckReport, HessianReport, SyntheticFamilySpec};
use arapreg_core::trainer::{Checkpoint, RegularizerMode, TrainConfig, TrainState};
use arapreg_core::Mesh;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn arapreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arapreg"))
        .args(args)
        .output()
        .expect("arapreg binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    fs::write(path, serde_json::to_string(value).unwrap()).unwrap();
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(samples: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticFamilySpec {
            segments: 8,
            ring_vertices: 6,
            samples,
            ..Default::default()
        };
        write_json(&dir.path().join("spec.json"), &spec);
        let f = Self { dir };
        let out = arapreg(&[
            "gen-dataset",
            "--config",
            s(&f.path("spec.json")),
            "--out",
            s(&f.path("data")),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, name: &str, cfg: &TrainConfig) -> PathBuf {
        let cfg_path = self.path(&format!("{name}.json"));
        write_json(&cfg_path, cfg);
        let out_dir = self.path(name);
        let out = arapreg(&[
            "train",
            s(&self.path("data")),
            "--config",
            s(&cfg_path),
            "--out",
            s(&out_dir),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    }
}

fn small_config(mode: RegularizerMode) -> TrainConfig {
    TrainConfig {
        regularizer_mode: mode,
        alternating_iters: 2,
        hidden_widths: vec![8],
        latent_dim: 3,
        refine_iters: 50,
        ..Default::default()
    }
}

fn spectral_column(csv: &Path) -> Vec<f64> {
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,recon,smooth,spectral,kl,total"));
    lines.map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect()
}

#[test]
fn unknown_flags_are_errors() {
    let out = arapreg(&["gradcheck", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));
}

#[test]
fn gen_dataset_writes_manifest() {
    let f = Fixture::new(3);
    let names: Vec<String> = fs::read_dir(f.path("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 4);
    assert!(names.contains(&"manifest.json".to_string()));
    assert!(names.contains(&"sample_0002.obj".to_string()));
}

#[test]
fn config_rejects_unknown_keys() {
    let f = Fixture::new(2);
    fs::write(f.path("bad.json"), r#"{"lambda_reg": 1.0, "no_such_key": 3}"#).unwrap();
    let out = arapreg(&[
        "train",
        s(&f.path("data")),
        "--config",
        s(&f.path("bad.json")),
        "--out",
        s(&f.path("run")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn none_and_robust_differ_in_spectral_column() {
    let f = Fixture::new(3);
    let none = f.train("none", &small_config(RegularizerMode::None));
    let robust = f.train("robust", &small_config(RegularizerMode::Robust));
    assert!(spectral_column(&none.join("loss.csv")).iter().all(|&v| v == 0.0));
    assert!(spectral_column(&robust.join("loss.csv")).iter().all(|&v| v > 0.0));
}

#[test]
fn zero_iterations_write_the_initialization() {
    let f = Fixture::new(3);
    let cfg = TrainConfig {
        alternating_iters: 0,
        ..small_config(RegularizerMode::Robust)
    };
    let run = f.train("zero", &cfg);
    let ck = Checkpoint::load(run.join("checkpoint.json")).unwrap();
    let data: Vec<Mesh> = arapreg_core::toolkit::load_dataset(&f.path("data"))
        .unwrap()
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    let init = TrainState::new(&data, &cfg).unwrap();
    assert_eq!(ck.generator().unwrap().theta(), init.generator.theta());
    assert_eq!(ck.latent_vectors(), init.latents);
}

#[test]
fn eval_interpolate_extrapolate() {
    let f = Fixture::new(4);
    let run = f.train("robust", &small_config(RegularizerMode::Robust));
    let ck = run.join("checkpoint.json");
    let a = f.path("data/sample_0000.obj");
    let b = f.path("data/sample_0001.obj");

    let out = arapreg(&["eval", s(&ck), s(&f.path("data")), "--out", s(&f.path("eval"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("median"));
    assert!(f.path("eval/eval.json").exists());

    let empty = f.path("empty");
    fs::create_dir_all(&empty).unwrap();
    assert!(!arapreg(&["eval", s(&ck), s(&empty)]).status.success());

    let out = arapreg(&[
        "interpolate",
        s(&ck),
        s(&a),
        s(&a),
        "--steps",
        "4",
        "--out",
        s(&f.path("same")),
    ]);
    assert!(out.status.success());
    let profile: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("same/interpolation.json")).unwrap()).unwrap();
    assert_eq!(profile["total_energy"].as_f64(), Some(0.0));
    let first = fs::read(f.path("same/frame_0000.obj")).unwrap();
    assert_eq!(first, fs::read(f.path("same/frame_0003.obj")).unwrap());

    assert!(!arapreg(&[
        "interpolate",
        s(&ck),
        s(&a),
        s(&b),
        "--steps",
        "1",
        "--out",
        s(&f.path("bad"))
    ])
    .status
    .success());

    let out = arapreg(&[
        "extrapolate",
        s(&ck),
        s(&b),
        "--count",
        "3",
        "--sigma",
        "0",
        "--out",
        s(&f.path("zero")),
    ]);
    assert!(out.status.success());
    let recon = fs::read(f.path("zero/reconstruction.obj")).unwrap();
    for i in 0..3 {
        assert_eq!(fs::read(f.path(&format!("zero/sample_{i:04}.obj"))).unwrap(), recon);
    }

    for dir in ["ex1", "ex2"] {
        assert!(arapreg(&[
            "extrapolate",
            s(&ck),
            s(&b),
            "--count",
            "2",
            "--seed",
            "5",
            "--out",
            s(&f.path(dir))
        ])
        .status
        .success());
    }
    for file in ["extrapolation.json", "sample_0000.obj", "sample_0001.obj"] {
        assert_eq!(
            fs::read(f.path("ex1").join(file)).unwrap(),
            fs::read(f.path("ex2").join(file)).unwrap()
        );
    }
    assert!(
        !arapreg(&["extrapolate", s(&ck), s(&b), "--count", "0", "--out", s(&f.path("ex0"))])
            .status
            .success()
    );
}

fn gradcheck_report(args: &[&str], dir: &Path) -> (Output, GradcheckReport) {
    let mut full = vec!["gradcheck", "--out", s(dir)];
    full.extend_from_slice(args);
    let out = arapreg(&full);
    let report = serde_json::from_str(&fs::read_to_string(dir.join("gradcheck.json")).unwrap()).unwrap();
    (out, report)
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let dir = tempfile::tempdir().unwrap();
    let (out, report) = gradcheck_report(&[], &dir.path().join("clean"));
    assert!(out.status.success());
    assert!(report.passed);

    let (out, report) = gradcheck_report(&["-k", "1"], &dir.path().join("k1"));
    assert!(out.status.success(), "{:?}", report.failed());

    let (out, report) = gradcheck_report(&["--flip-dd-term"], &dir.path().join("fault"));
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(report.failed(), ["dd_form", "arapreg_loss_gradient"]);
}

fn hessian(mesh: &Path, jacobian: Option<&Path>, out: &Path) -> HessianReport {
    let mut args = vec!["hessian", s(mesh), "--out", s(out)];
    if let Some(j) = jacobian {
        args.extend_from_slice(&["--jacobian", s(j)]);
    }
    let run = arapreg(&args);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    serde_json::from_str(&fs::read_to_string(out.join("hessian.json")).unwrap()).unwrap()
}

fn write_jacobian(path: &Path, j: &DMatrix<f64>) {
    let rows: Vec<Vec<f64>> = (0..j.nrows()).map(|r| j.row(r).iter().copied().collect()).collect();
    write_json(path, &rows);
}

#[test]
fn hessian_reports() {
    let dir = tempfile::tempdir().unwrap();
    let tet = dir.path().join("tet.obj");
    arapreg_core::mesh::tetrahedron().save_obj(&tet).unwrap();
    let report = hessian(&tet, None, &dir.path().join("plain"));
    assert!(report.null_space.kernel_dimension >= 6);
    assert!(report.spectrum.is_none());

    let n = 4;
    let translation = DMatrix::from_fn(3 * n, 3, |r, c| if r % 3 == c { 1.0 } else { 0.0 });
    let jt = dir.path().join("translation.json");
    write_jacobian(&jt, &translation);
    let report = hessian(&tet, Some(&jt), &dir.path().join("translation"));
    assert!(report.spectrum.unwrap().iter().all(|v| v.abs() <= 1e-10));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = 4;
    let random = DMatrix::from_fn(3 * n, k, |_, _| rng.sample(StandardNormal));
    let jr = dir.path().join("random.json");
    write_jacobian(&jr, &random);
    let report = hessian(&tet, Some(&jr), &dir.path().join("random"));
    let bound = (k as f64).sqrt() * report.trace.unwrap().sqrt();
    assert!(report.robust_half.unwrap() <= bound * (1.0 + 1e-12));

    let bad = dir.path().join("bad.json");
    write_jacobian(&bad, &DMatrix::zeros(5, 2));
    assert!(!arapreg(&["hessian", s(&tet), "--jacobian", s(&bad)]).status.success());
}

#[test]
fn default_training_fits_the_runtime_budget() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(arapreg(&["gen-dataset", "--out", s(&data)]).status.success());
    let start = std::time::Instant::now();
    let out = arapreg(&["train", s(&data), "--out", s(&dir.path().join("run"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed() < std::time::Duration::from_secs(600));
    let csv = fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 32);
}

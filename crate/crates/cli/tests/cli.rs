use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxfield")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(dir: &Path) -> std::path::PathBuf {
    let scene = dir.join("scene");
    ok(&["synth", "--preset", "toy", "--out", s(&scene)]);
    scene.join("manifest.json")
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let out = run(&["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_preset_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--preset", "moon", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fit_zero_steps_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy(dir.path());
    let ck = dir.path().join("zero.vxa");
    ok(&["fit", "--manifest", s(&manifest), "--out", s(&ck), "--steps", "0"]);
    assert!(ck.exists());
    let csv = std::fs::read_to_string(dir.path().join("zero.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn pipeline_runs_end_to_end_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy(dir.path());
    let ck = dir.path().join("a.vxa");
    let fit = |out: &Path| {
        ok(&["fit", "--manifest", s(&manifest), "--out", s(out), "--steps", "8", "--seed", "3", "--feature-distill"]);
    };
    fit(&ck);
    let again = dir.path().join("b.vxa");
    fit(&again);
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.csv")).unwrap(),
        std::fs::read(dir.path().join("b.csv")).unwrap()
    );

    let renders = dir.path().join("renders");
    ok(&["render", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--out", s(&renders)]);
    for f in ["a_rgb.vxt", "a_rgb.ppm", "a_depth.vxt", "a_opacity.vxt", "a_feature.vxt", "b_rgb.vxt"] {
        assert!(renders.join(f).exists(), "{f}");
    }

    let report = ok(&["eval", "--manifest", s(&manifest), "--renders", s(&renders)]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(v.to_string().contains("psnr"));

    let occ = dir.path().join("occ");
    let report = ok(&["occupancy", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--out", s(&occ)]);
    serde_json::from_str::<serde_json::Value>(&report).unwrap();

    let heat = dir.path().join("heat.vxt");
    ok(&["query", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--camera", "a", "--embedding", "0.2,0.1,0.9,0.1,0.1,0.2,0.8,0.1", "--out", s(&heat)]);
    assert!(heat.exists());
}

#[test]
fn eval_shape_mismatch_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.vxt");
    let b = dir.path().join("b.vxt");
    let t = |shape: Vec<usize>| voxfield::tensor_io::Tensor::from_f64(shape.clone(), vec![0.5; shape.iter().product()]).unwrap();
    voxfield::tensor_io::write_tensor(&a, &t(vec![4, 4, 3])).unwrap();
    voxfield::tensor_io::write_tensor(&b, &t(vec![4, 5, 3])).unwrap();
    let out = run(&["eval", "--pred", s(&a), "--gt", s(&b)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("shape"));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seeds", "0"]);
    assert!(!out.is_empty());
}

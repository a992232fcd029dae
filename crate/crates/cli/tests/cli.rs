use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5

[synth]
fixture = "slab"
cameras = 3
annotations = 10

[train_field]
iterations = 6
batch_size = 64
depth_batch_size = 16
samples = 32
resolution = [8, 8, 8]
depth_loss_weight = 0.5

[gen]
pairs_per_epoch = 4
samples_per_pair = 8
samples = 48

[train_desc]
steps = 2
batch_size = 8

[eval]
annotations = 10
samples = 48
"#;

fn nerfsup(root: &Path, out: &str, env: &[(&str, &str)], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nerfsup"));
    for (k, _) in std::env::vars() {
        if k.starts_with("NERFSUP_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(env.iter().copied())
        .arg("--config")
        .arg(root.join("config.toml"))
        .arg("--out")
        .arg(root.join(out))
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    ok(nerfsup(dir.path(), "data", &[], &["synth"]));
    dir
}

fn manifest(root: &Path) -> String {
    root.join("data/manifest.json").display().to_string()
}

#[test]
fn synth_writes_named_fixture() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), "").unwrap();
    ok(nerfsup(dir.path(), "data", &[], &["synth", "slab"]));
    let images = fs::read_dir(dir.path().join("data/images")).unwrap().count();
    assert_eq!(images, 16);
    for f in ["manifest.json", "fixture.json", "annotations.csv", "run.json"] {
        assert!(dir.path().join("data").join(f).exists(), "{f}");
    }
}

#[test]
fn zero_cameras_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), "").unwrap();
    let o = nerfsup(dir.path(), "data", &[], &["synth", "slab", "--cameras", "0"]);
    assert!(!o.status.success());
}

#[test]
fn missing_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    let o = nerfsup(dir.path(), "train", &[], &["train-field", "--manifest", "nowhere/manifest.json"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere/manifest.json"));
}

#[test]
fn resumed_training_matches_a_single_run() {
    let dir = setup();
    let root = dir.path();
    let m = manifest(root);
    ok(nerfsup(root, "whole", &[], &["train-field", "--manifest", &m]));
    ok(nerfsup(root, "split", &[], &["train-field", "--manifest", &m, "--stop-after", "2"]));
    ok(nerfsup(root, "split", &[], &["train-field", "--manifest", &m, "--stop-after", "3", "--resume"]));
    ok(nerfsup(root, "split", &[], &["train-field", "--manifest", &m, "--resume"]));
    for f in ["field.bin", "optimizer.state", "loss.csv"] {
        assert_eq!(
            fs::read(root.join("whole").join(f)).unwrap(),
            fs::read(root.join("split").join(f)).unwrap(),
            "{f}"
        );
    }
}

fn lambda_used(root: &Path) -> f64 {
    let run: serde_json::Value = serde_json::from_slice(&fs::read(root.join("train/run.json")).unwrap()).unwrap();
    run["params"]["depth_loss_weight"].as_f64().unwrap()
}

#[test]
fn flag_beats_environment_beats_config() {
    let dir = setup();
    let root = dir.path();
    let m = manifest(root);
    let base = ["train-field", "--manifest", m.as_str(), "--iterations", "1"];
    ok(nerfsup(root, "train", &[], &base));
    assert_eq!(lambda_used(root), 0.5);
    let env = [("NERFSUP_LAMBDA_DEPTH", "0.25")];
    ok(nerfsup(root, "train", &env, &base));
    assert_eq!(lambda_used(root), 0.25);
    let mut with_flag = base.to_vec();
    with_flag.extend(["--lambda-depth", "0.75"]);
    ok(nerfsup(root, "train", &env, &with_flag));
    assert_eq!(lambda_used(root), 0.75);
}

#[test]
fn empty_tuple_file_is_an_error() {
    let dir = setup();
    let root = dir.path();
    let tuples = root.join("tuples.csv");
    fs::write(&tuples, "src_id,us_x,us_y,tgt_id,ut_x,ut_y,depth,weight,method\n").unwrap();
    let o = nerfsup(
        root,
        "desc",
        &[],
        &["train-desc", "--manifest", &manifest(root), "--tuples", &tuples.display().to_string()],
    );
    assert!(!o.status.success());
}

#[test]
fn oracle_matcher_scores_perfectly() {
    let dir = setup();
    let root = dir.path();
    ok(nerfsup(root, "eval", &[], &["eval", "--manifest", &manifest(root), "--oracle"]));
    let csv = fs::read_to_string(root.join("eval/eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "method,n,invalid,aepe,pck@3px,pck@5px");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[1], "10");
    assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[4].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row[5].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn pipeline_produces_every_artifact() {
    let dir = setup();
    let root = dir.path();
    let m = manifest(root);
    ok(nerfsup(root, "train", &[], &["train-field", "--manifest", &m]));
    let field = root.join("train/field.bin").display().to_string();
    let o = ok(nerfsup(root, "gen", &[], &["gen", "--manifest", &m, "--field", &field, "--no-cycle-check"]));
    let report = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(report.contains("emitted:"), "{report}");
    let tuples = root.join("gen/tuples.csv").display().to_string();
    ok(nerfsup(root, "desc", &[], &["train-desc", "--manifest", &m, "--tuples", &tuples]));
    let model = root.join("desc/model.bin").display().to_string();
    ok(nerfsup(root, "eval", &[], &["eval", "--manifest", &m, "--model", &model]));
    ok(nerfsup(root, "render", &[], &["render", "--manifest", &m, "--field", &field]));
    for f in [
        "gen/report.txt",
        "desc/loss.csv",
        "eval/eval.csv",
        "eval/descriptors/000.png",
        "render/renders/000.png",
        "render/renders/000.depth",
        "render/psnr.csv",
    ] {
        assert!(root.join(f).exists(), "{f}");
    }
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [0, 1]

[model]
family = "convnext"
embed_dim = 8
depth = 2
expansion = 2
patch_size = 2
image_size = 16

[data]
kind = "synthetic"
spec = { samples_per_class = 4, test_samples_per_class = 2 }

[train]
epochs = 1
batch_size = 16
"#;

fn mimetic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimetic")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let ok = mimetic(&["gradcheck", "--ops", "matmul,gelu", "--points", "5"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(stdout(&ok).contains("gelu"));

    let bad = mimetic(&["gradcheck", "--ops", "gelu", "--points", "5", "--inject-fault", "gelu-derivative"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL"));

    assert_eq!(mimetic(&["gradcheck", "--ops", "nope"]).status.code(), Some(2));
}

#[test]
fn invalid_configs_and_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[model]\nfamily = \"resnet\"\n").unwrap();
    let out = mimetic(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let cfg = tiny_config(dir.path());
    assert_eq!(mimetic(&["train", "--config", &cfg, "--seeds", "3..1"]).status.code(), Some(2));
    assert_eq!(mimetic(&["train", "--config", &cfg, "--init", "constant:x"]).status.code(), Some(2));
    assert_eq!(mimetic(&["analyze", dir.path().join("missing").to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn train_writes_results_and_refuses_to_clobber() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let args = [
        "train",
        "--config",
        &cfg,
        "--seeds",
        "0,1",
        "--epochs",
        "0",
        "--init",
        "none",
        "--init",
        "rowvec:0.02",
        "--out",
        out_s,
    ];
    let first = mimetic(&args);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("rowvec:0.02"));
    let csv = fs::read_to_string(out.join("train.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(out.join("rowvec_0.02/seed-000001.mimw").exists());

    assert_eq!(mimetic(&args).status.code(), Some(2));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(mimetic(&forced).status.code(), Some(0));
}

#[test]
fn farm_resumes_and_analyze_reports_population_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let farm = dir.path().join("farm");
    let farm_s = farm.to_str().unwrap();
    let first = mimetic(&["farm", "--config", &cfg, "--k", "8", "--out", farm_s, "--parallel", "2"]);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("trained 8"));
    let again = mimetic(&["farm", "--config", &cfg, "--k", "8", "--out", farm_s]);
    assert!(stdout(&again).contains("trained 0, already present 8"));

    let analysis = dir.path().join("analysis");
    let out = mimetic(&["analyze", farm_s, "--layer", "0", "--out", analysis.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(analysis.join("stats_layer0.json")).unwrap()).unwrap();
    assert_eq!(stats["k"], 8);
    for w in ["w1", "w2"] {
        for axis in ["rows", "columns"] {
            assert!(stats["stripe_scores"][w][axis].as_f64().unwrap() > 0.0);
        }
    }
    assert!(stats["rho"].as_f64().unwrap().abs() <= 1.0);
    assert!(analysis.join("cov_layer0.csv").exists());
}

#[test]
fn identical_population_members_are_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let farm = dir.path().join("farm");
    let farm_s = farm.to_str().unwrap();
    assert_eq!(
        mimetic(&["farm", "--config", &cfg, "--k", "2", "--epochs", "0", "--out", farm_s]).status.code(),
        Some(0)
    );
    let copies = dir.path().join("copies");
    fs::create_dir(&copies).unwrap();
    let bytes = fs::read(farm.join("seed-000000.mimw")).unwrap();
    for i in 0..8 {
        fs::write(copies.join(format!("copy-{i}.mimw")), &bytes).unwrap();
    }
    let out = mimetic(&["analyze", copies.to_str().unwrap(), "--layer", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"), "{}", String::from_utf8_lossy(&out.stderr));
}

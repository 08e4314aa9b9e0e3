//! End-to-end runs of the `msdm-lab` binary on small configs.

use std::path::Path;
use std::process::{Command, Output};

use msdm_lab::cli::{read_array, ExperimentConfig};
use msdm_lab::metrics::EvalSummary;

const SMALL: &str = r#"
seed = 5
[dataset]
train = 40
valid = 2
test = 6
dim = 16
[schedule]
steps = 30
[eval]
chunk_len = 16
hop = 16
[sweep]
models = ["joint", "weak"]
likelihoods = ["dirac", "gaussian"]
s_churn = [0.0, 20.0]
constrained_sources = [1]
gamma_coeffs = [1.0]
[generate]
count = 5
[impute]
count = 3
[train]
steps = 30
batch = 8
per_source = true
[model]
hidden = [16, 16]
f_features = 2
"#;

fn msdm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msdm-lab"))
        .current_dir(dir)
        .env_remove("MSDM_LAB_WORKERS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = msdm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn resolved_config_is_a_valid_config() {
    let dir = setup();
    ok(dir.path(), &["generate", "--config", "small.toml", "--out", "a"]);
    let first = std::fs::read_to_string(dir.path().join("a/config.resolved.toml")).unwrap();
    ok(dir.path(), &["generate", "--config", "a/config.resolved.toml", "--out", "a"]);
    let again = std::fs::read_to_string(dir.path().join("a/config.resolved.toml")).unwrap();
    assert_eq!(first, again);
    let parsed = ExperimentConfig::from_toml(&first, "dump").unwrap();
    assert_eq!(parsed.dataset.dim, 16);
    assert!(parsed.dataset.coloring.is_some(), "defaults are spelled out");
    assert!(first.contains("rho = 7.0"));
}

#[test]
fn sweep_csv_is_byte_identical_across_worker_counts() {
    let dir = setup();
    ok(dir.path(), &["sweep", "--config", "small.toml", "--out", "a", "--workers", "1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_msdm-lab"))
        .current_dir(dir.path())
        .env("MSDM_LAB_WORKERS", "3")
        .args(["sweep", "--config", "small.toml", "--out", "b"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let a = std::fs::read(dir.path().join("a/results.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/results.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,likelihood,s_churn,constrained_or_gamma,bass,drums,guitar,piano,all,n_chunks,seed"
    );
    assert_eq!(lines.count(), 8);
    assert!(!text.contains('\r'));
    assert!(text.lines().nth(1).unwrap().starts_with("joint,dirac,0,drums,"));
}

#[test]
fn seed_flag_changes_results() {
    let dir = setup();
    ok(dir.path(), &["sweep", "--config", "small.toml", "--out", "a"]);
    ok(dir.path(), &["sweep", "--config", "small.toml", "--out", "b", "--seed", "6"]);
    let a = std::fs::read_to_string(dir.path().join("a/results.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/results.csv")).unwrap();
    assert_ne!(a, b);
    assert!(b.lines().nth(1).unwrap().ends_with(",6"));
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "[sampler]\nchurn = 3\n").unwrap();
    let out = msdm(dir.path(), &["eval", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("churn"), "{err}");

    std::fs::write(dir.path().join("empty.toml"), "[sweep]\ngamma_coeffs = []\n").unwrap();
    let out = msdm(dir.path(), &["sweep", "--config", "empty.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep.gamma_coeffs"));

    let out = msdm(dir.path(), &["eval", "--config", "small.toml", "--out", "w", "--workers", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_exits_with_code_4() {
    let dir = setup();
    assert_eq!(msdm(dir.path(), &["eval", "--config", "nope.toml"]).status.code(), Some(4));
}

#[test]
fn generate_with_zero_count_writes_an_empty_array() {
    let dir = setup();
    std::fs::write(dir.path().join("zero.toml"), SMALL.replace("count = 5", "count = 0")).unwrap();
    ok(dir.path(), &["generate", "--config", "zero.toml", "--out", "z"]);
    let (data, shape) = read_array(&dir.path().join("z"), "generated").unwrap();
    assert!(data.is_empty());
    assert_eq!(shape, vec![0, 4, 16]);
}

#[test]
fn separate_writes_arrays_that_sum_to_the_mixtures() {
    let dir = setup();
    ok(dir.path(), &["separate", "--config", "small.toml", "--out", "s", "--wav"]);
    let out = dir.path().join("s");
    let (est, shape) = read_array(&out, "separated").unwrap();
    let (mix, mshape) = read_array(&out, "mixtures").unwrap();
    assert_eq!(shape, vec![6, 4, 16]);
    assert_eq!(mshape, vec![6, 16]);
    for c in 0..6 {
        for t in 0..16 {
            let sum: f64 = (0..4).map(|n| est[(c * 4 + n) * 16 + t]).sum();
            assert!((sum - mix[c * 16 + t]).abs() < 1e-9);
        }
    }
    assert!(out.join("wav/chunk000_bass.wav").exists());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "separate");
    assert!(manifest["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o == "separated.bin"));
}

#[test]
fn identity_eval_reports_the_metric_upper_bound() {
    let dir = setup();
    std::fs::write(dir.path().join("id.toml"), SMALL.replace("hop = 16", "hop = 16\nseparator = \"identity\"")).unwrap();
    ok(dir.path(), &["eval", "--config", "id.toml", "--out", "e"]);
    let summary: EvalSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("e/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.n_chunks, 6);
    assert!(summary.all > 80.0);
    let csv = std::fs::read_to_string(dir.path().join("e/eval_chunks.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn trained_checkpoints_drive_every_sampling_command() {
    let dir = setup();
    ok(dir.path(), &["train", "--config", "small.toml", "--out", "t"]);
    let t = dir.path().join("t");
    for f in ["model.ckpt", "model_bass.ckpt", "model_piano.ckpt", "loss.csv"] {
        assert!(t.join(f).exists(), "{f}");
    }
    let learned = SMALL.replace(
        "[model]\n",
        "[model]\nkind = \"denoiser\"\ncheckpoint = \"t/model.ckpt\"\nper_source_checkpoints = [\"t/model_bass.ckpt\", \"t/model_drums.ckpt\", \"t/model_guitar.ckpt\", \"t/model_piano.ckpt\"]\n",
    );
    std::fs::write(dir.path().join("learned.toml"), learned).unwrap();
    for cmd in ["generate", "impute", "separate", "eval", "sweep"] {
        ok(dir.path(), &[cmd, "--config", "learned.toml", "--out", cmd]);
    }
    let (imputed, shape) = read_array(&dir.path().join("impute"), "imputed").unwrap();
    let (reference, _) = read_array(&dir.path().join("impute"), "reference").unwrap();
    assert_eq!(shape, vec![3, 4, 16]);
    // fixed stems (drums, guitar, piano) come back exactly
    for k in 0..3 {
        assert_eq!(&imputed[k * 64 + 16..(k + 1) * 64], &reference[16..]);
    }

    // A checkpoint of the wrong shape is a config error.
    std::fs::write(
        dir.path().join("wrong.toml"),
        SMALL.replace("dim = 16", "dim = 8").replace("hop = 16", "hop = 8").replace("chunk_len = 16", "chunk_len = 8").replace(
            "[model]\n",
            "[model]\nkind = \"denoiser\"\ncheckpoint = \"t/model.ckpt\"\n",
        ),
    )
    .unwrap();
    assert_eq!(msdm(dir.path(), &["generate", "--config", "wrong.toml", "--out", "w"]).status.code(), Some(2));
}

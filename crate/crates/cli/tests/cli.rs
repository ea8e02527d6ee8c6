use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3
domains = 2
batch_size = 40
epochs = 2
learning_rate = 1.0
expert_hidden = [4]
repr_dim = 3
tower_hidden = [2]
prototypes = 2
embedding_dim = 3

[dataset]
kind = "synth"
affinity = [[1.0, 0.5], [0.5, 1.0]]
noise = [0.05, 0.05]
fields = 3
vocab = 5
sizes = [200, 200]
"#;

fn simdomain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simdomain"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = simdomain(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, CONFIG).unwrap();
    (dir, config.to_str().unwrap().to_owned())
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn train_is_reproducible_and_feeds_eval() {
    let (dir, config) = setup();
    let (a, b) = (path(dir.path(), "a"), path(dir.path(), "b"));
    ok(&["train", "--config", &config, "--out", &a]);
    ok(&["train", "--config", &config, "--out", &b]);
    for file in [
        "report.json",
        "selection_trace.log",
        "distance_matrix.csv",
        "checkpoint.bin",
    ] {
        let x = fs::read(Path::new(&a).join(file)).unwrap();
        assert_eq!(x, fs::read(Path::new(&b).join(file)).unwrap(), "{file}");
    }

    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(Path::new(&a).join("report.json")).unwrap()).unwrap();
    ok(&["eval", "--out", &a]);
    let eval: serde_json::Value =
        serde_json::from_slice(&fs::read(Path::new(&a).join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["test"], report["test"]);
    assert_eq!(eval["subsets"], report["active_subsets"]);

    let c = path(dir.path(), "c");
    ok(&[
        "distances",
        "--config",
        &config,
        "--out",
        &c,
        "--checkpoint",
        &path(Path::new(&a), "checkpoint.bin"),
    ]);
    let csv = fs::read_to_string(Path::new(&c).join("distance_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("from\\to,0,1"));
}

#[test]
fn transfer_and_oracle_write_outputs() {
    let (dir, config) = setup();
    let out = path(dir.path(), "out");
    ok(&["transfer", "--config", &config, "--out", &out]);
    let csv = fs::read_to_string(Path::new(&out).join("transfer_matrix.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,,"));
    assert!(rows[2].ends_with(','));

    ok(&["oracle", "--config", &config, "--out", &out]);
    let oracle: serde_json::Value =
        serde_json::from_slice(&fs::read(Path::new(&out).join("oracle.json")).unwrap()).unwrap();
    assert_eq!(oracle["runs"], 2);
}

#[test]
fn timing_writes_report() {
    let (dir, config) = setup();
    let out = path(dir.path(), "t");
    ok(&[
        "timing",
        "--config",
        &config,
        "--out",
        &out,
        "--warmup",
        "1",
        "--batches",
        "3",
    ]);
    let t: serde_json::Value =
        serde_json::from_slice(&fs::read(Path::new(&out).join("timing.json")).unwrap()).unwrap();
    assert!(t["backbone"]["mean_ms"].as_f64().unwrap() > 0.0);
}

fn error_of(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap();
    serde_json::from_str::<serde_json::Value>(line).unwrap()["error"].clone()
}

#[test]
fn errors_are_categorised() {
    let (dir, config) = setup();
    let out = path(dir.path(), "out");

    let missing = simdomain(&[
        "train",
        "--config",
        &path(dir.path(), "nope.toml"),
        "--out",
        &out,
    ]);
    assert_eq!(missing.status.code(), Some(6));
    assert_eq!(error_of(&missing)["category"], "io");

    let bad = path(dir.path(), "bad.toml");
    fs::write(&bad, CONFIG.replace("epochs = 2", "epochs = 2\nbogus = 1")).unwrap();
    let r = simdomain(&["train", "--config", &bad, "--out", &out]);
    assert_eq!(r.status.code(), Some(3));
    assert_eq!(error_of(&r)["category"], "config");

    let big = path(dir.path(), "big.toml");
    fs::write(
        &big,
        CONFIG.replace("sizes = [200, 200]", "sizes = [6000, 6000]"),
    )
    .unwrap();
    let r = simdomain(&["oracle", "--config", &big, "--out", &out]);
    assert_eq!(r.status.code(), Some(3));
    assert_eq!(error_of(&r)["category"], "guard-rail");

    let garbage = path(dir.path(), "garbage.bin");
    fs::write(&garbage, b"SDCK\x01\x00\x00\x00short").unwrap();
    let r = simdomain(&[
        "eval",
        "--config",
        &config,
        "--checkpoint",
        &garbage,
        "--out",
        &out,
    ]);
    assert_eq!(r.status.code(), Some(5));
    assert_eq!(error_of(&r)["category"], "checkpoint");

    let r = simdomain(&["train", "--out", &out]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_of(&r)["category"], "usage");
}

//! End-to-end runs of the `compdiff` binary.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn compdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compdiff")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "failed: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("out = \"{}\"\n{body}", dir.join("out").display())).unwrap();
    path.display().to_string()
}

const TINY: &str = r#"
[data]
train_count = 10
test_count = 2
[train]
step_budget = 5
batch_size = 2
[infer]
sgd_steps = 5
sample_count = 4
restarts = 2
"#;

#[test]
fn gen_writes_the_requested_record_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    ok(&compdiff(dir.path(), &["--config", &cfg, "gen"]));
    let out = compdiff(dir.path(), &["describe", "out/train.cdsd"]);
    ok(&out);
    let header: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(header["count"], 10);
    assert!(dir.path().join("out/gen.resolved.toml").exists());
}

#[test]
fn artifacts_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut runs = Vec::new();
    for _ in 0..2 {
        for cmd in ["gen", "train", "infer", "eval"] {
            ok(&compdiff(dir.path(), &["--config", &cfg, cmd]));
        }
        let read = |f: &str| std::fs::read(dir.path().join("out").join(f)).unwrap();
        runs.push(
            ["train.cdsd", "model.ckpt", "loss.csv", "reports/scene-0000.json", "predictions.json", "metrics.csv"].map(read),
        );
    }
    assert!(runs[0] == runs[1]);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 3\n");
    ok(&compdiff(dir.path(), &["--config", &cfg, "--seed", "9", "--out", "elsewhere", "gen"]));
    let echo = std::fs::read_to_string(dir.path().join("elsewhere/gen.resolved.toml")).unwrap();
    let parsed: toml::Value = toml::from_str(&echo).unwrap();
    assert_eq!(parsed["seed"].as_integer(), Some(9));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}\n[predict]\nscenes = 1\n[sweep]\nrestarts = [1, 20]\nseeds = [0, 1]\n"));
    for cmd in ["gen", "train"] {
        ok(&compdiff(dir.path(), &["--config", &cfg, cmd]));
    }
    ok(&compdiff(dir.path(), &["--config", &cfg, "--jobs", "2", "sweep"]));
    let mut rdr = csv::Reader::from_path(dir.path().join("out/sweep.csv")).unwrap();
    let cells: Vec<(String, String)> = rdr.records().map(|r| r.unwrap()).map(|r| (r[0].to_string(), r[1].to_string())).collect();
    let want: Vec<(String, String)> =
        [("1", "0"), ("1", "1"), ("20", "0"), ("20", "1")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    assert_eq!(cells, want);
}

#[test]
fn failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |out: Output| out.status.code();

    let bad = write_config(dir.path(), "[train]\nstep_budgett = 3\n");
    let out = compdiff(dir.path(), &["--config", &bad, "gen"]);
    assert_eq!(code(out.clone()), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step_budgett"));

    let cfg = write_config(dir.path(), TINY);
    let out = compdiff(dir.path(), &["--config", &cfg, "infer"]);
    assert_eq!(code(out.clone()), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    ok(&compdiff(dir.path(), &["--config", &cfg, "gen"]));
    let data = dir.path().join("out/train.cdsd");
    let mut bytes = std::fs::read(&data).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&data, bytes).unwrap();
    let out = compdiff(dir.path(), &["--config", &cfg, "train"]);
    assert_eq!(code(out.clone()), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));

    let blowup = write_config(
        dir.path(),
        &format!("{TINY}\n[train.optimizer]\ntype = \"plain-sgd\"\n").replace("batch_size = 2", "batch_size = 2\nlearning_rate = 1e300"),
    );
    ok(&compdiff(dir.path(), &["--config", &blowup, "gen"]));
    let out = compdiff(dir.path(), &["--config", &blowup, "train"]);
    assert_eq!(code(out.clone()), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    let mode = write_config(dir.path(), "[predict]\nmode = \"relaxed\"\n");
    assert_eq!(code(compdiff(dir.path(), &["--config", &mode, "gen"])), Some(2));
}

/// gen 64 → train 300 steps → infer 8 → eval at 16×16. On one core wall
/// time bounds CPU time, so this also bounds the CPU budget there.
#[test]
fn smoke_pipeline_fits_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[data]\ntrain_count = 64\ntest_count = 8\n[train]\nstep_budget = 300\n[infer]\nlearning_rate = 0.01\nt_range = { lo = 1, hi = 200 }\n",
    );
    let start = Instant::now();
    for cmd in ["gen", "train", "infer", "eval"] {
        ok(&compdiff(dir.path(), &["--config", &cfg, cmd]));
    }
    let secs = start.elapsed().as_secs_f64();
    eprintln!("smoke pipeline: {secs:.1}s");
    assert!(secs < 300.0, "pipeline took {secs:.1}s");
    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 10);
    assert!(metrics.lines().last().unwrap().starts_with("summary,"));
    let overlay = std::fs::read(dir.path().join("out/overlays/scene-0007.ppm")).unwrap();
    assert!(overlay.starts_with(b"P6\n128 128\n255\n"));
    assert_eq!(overlay.len(), "P6\n128 128\n255\n".len() + 128 * 128 * 3);
}

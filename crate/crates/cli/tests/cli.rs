use std::path::Path;
use std::process::Command;

fn run(dir: &Path, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_edcopilot"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "gen.toml", "n_patients = 300\n");
    write(
        d,
        "sft.toml",
        "epochs = 1\nbatch_size = 16\n[encoder]\nd_model = 16\nn_blocks = 1\nn_heads = 2\nd_ff = 32\nhead_hidden = 16\n",
    );
    write(
        d,
        "rl.toml",
        "val_limit = 20\n[ppo]\ntotal_timesteps = 256\nbuffer_steps = 128\nminibatch_size = 64\n",
    );
    write(
        d,
        "sweep.toml",
        "[grid]\nalphas = [1.0, 64.0]\nbetas = [0.01]\n[rl]\nval_limit = 20\n[rl.ppo]\ntotal_timesteps = 128\nbuffer_steps = 128\nminibatch_size = 64\n",
    );
    write(d, "eval.toml", "test_limit = 20\n");
    write(d, "sim.toml", "limit = 4\n");

    assert_eq!(run(d, &["gen", "--config", "gen.toml", "--seed", "3", "--out", "data"]), 0);
    for f in ["cohort", "train", "val", "test"] {
        assert!(d.join("data").join(format!("{f}.jsonl")).exists());
    }
    let first = std::fs::read(d.join("data/cohort.jsonl")).unwrap();
    assert_eq!(run(d, &["gen", "--config", "gen.toml", "--seed", "3", "--out", "data2"]), 0);
    assert_eq!(first, std::fs::read(d.join("data2/cohort.jsonl")).unwrap());

    let sft = ["train-sft", "--config", "sft.toml", "--data", "data", "--train-limit", "80", "--out", "sft"];
    assert_eq!(run(d, &sft), 0);
    let rl = ["train-rl", "--config", "rl.toml", "--data", "data", "--encoder", "sft/encoder.edcp", "--out", "model"];
    assert_eq!(run(d, &rl), 0);
    for f in ["encoder.edcp", "policy.edcp", "learning_curve.csv"] {
        assert!(d.join("model").join(f).exists(), "{f}");
    }
    let sweep = ["sweep", "--config", "sweep.toml", "--data", "data", "--encoder", "sft/encoder.edcp", "--out", "sweep"];
    assert_eq!(run(d, &sweep), 0);
    let rows = std::fs::read_to_string(d.join("sweep/sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);

    let eval = ["eval", "--config", "eval.toml", "--data", "data", "--model", "model", "--out", "report"];
    assert_eq!(run(d, &eval), 0);
    let metrics = std::fs::read_to_string(d.join("report/metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("policy,")));
    assert!(metrics.lines().count() >= 8);
    assert_eq!(run(d, &["plot-data", "--report", "report", "--out", "plots"]), 0);
    assert_eq!(
        std::fs::read(d.join("report/plots.jsonl")).unwrap(),
        std::fs::read(d.join("plots/plots.jsonl")).unwrap()
    );

    let sim = ["simulate", "--config", "sim.toml", "--data", "data", "--model", "model", "--out", "sim"];
    assert_eq!(run(d, &sim), 0);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("sim/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["sessions"], 4);
    assert_eq!(summary["replay_identical"], 4);
}

#[test]
fn exit_codes_separate_validation_from_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "bad.toml", "bogus = 1\n");
    write(d, "tiny.toml", "n_patients = 5\n");
    write(d, "lr.toml", "lr = -1.0\n");
    assert_eq!(run(d, &["gen", "--config", "bad.toml", "--out", "x"]), 2);
    assert_eq!(run(d, &["gen", "--config", "missing.toml", "--out", "x"]), 2);
    assert_eq!(run(d, &["gen", "--config", "tiny.toml", "--out", "x"]), 2);
    assert_eq!(run(d, &["train-sft", "--config", "lr.toml", "--data", "x", "--out", "y"]), 2);
    assert_eq!(run(d, &["train-sft", "--data", "nope", "--out", "y"]), 1);
    assert_eq!(run(d, &["gen"]), 2);
}

use std::path::Path;
use std::process::{Command, Output};

fn duvio(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duvio")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const VIO: &str = "[vio]
image_width = 32
image_height = 16
visual_channels = [4, 8]
visual_kernels = [3, 3]
visual_strides = [2, 2]
visual_feature = 8
inertial_channels = [4, 4, 4]
inertial_feature = 8
lstm_layers = 1
lstm_hidden = 8
mlp_hidden = 8
epochs = 2
batch_size = 2
seq_len = 5
learning_rate = 1e-3
[dehaze.generator]
base_channels = 8
depth = 2
[dehaze.discriminator]
layers = 3
base_channels = 8
[dehaze.train]
epochs = 2
";

#[test]
fn subcommands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("cfg.toml"), VIO).unwrap();
    std::fs::write(d.join("spec.toml"), "duration = 1.0\nwidth = 32\nheight = 16\n").unwrap();
    let c = ["--config", "cfg.toml"];
    let run = |rest: &[&str]| {
        let args: Vec<&str> = c.iter().chain(rest).copied().collect();
        let out = duvio(&args, d);
        ok(&out);
        out
    };
    run(&["synth", "--spec", "spec.toml", "--out", "clean"]);
    run(&["disturb", "--in", "clean", "--scenario", "turbid", "--out", "hazy"]);
    run(&["dehaze-train", "--hazy", "hazy", "--clean", "clean", "--out", "gen.weights"]);
    run(&["dehaze-train", "--data", "clean", "--out", "gen2.weights"]);
    run(&["dehaze-run", "--weights", "gen.weights", "--in", "hazy", "--out", "dehazed"]);
    let eval = run(&["dehaze-eval", "--clean", "clean", "--test", "hazy", "--weights", "gen.weights"]);
    let v: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(v[0]["images"], "input");
    assert_eq!(v[1]["images"], "dehazed");
    assert!(v[1]["psnr"].as_f64().unwrap() > 0.0);
    run(&["dehaze-eval", "--pairs", "clean", "--report", "quality.json"]);
    let q: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("quality.json")).unwrap()).unwrap();
    // --pairs hazes with the same configured model as `disturb`
    assert_eq!(q[0]["psnr"], v[0]["psnr"]);
    run(&["vio-train", "--train", "hazy", "--dehazer", "gen.weights", "--out", "vio.weights"]);
    run(&["vio-infer", "--weights", "vio.weights", "--seq", "hazy", "--dehazer", "gen.weights", "--out", "pred.csv"]);
    let csv = std::fs::read_to_string(d.join("pred.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "index,vx,vy,vz,phix,phiy,phiz");
    assert_eq!(csv.lines().count(), 21);
    run(&["eval", "--pred", "pred.csv", "--ref", "hazy", "--dehazed", "--out", "eval.json"]);
    let table = run(&["report", "--in", "eval.json", "--charts", "charts"]);
    assert!(String::from_utf8_lossy(&table.stdout).contains("reference values, not reproduced"));
    assert!(d.join("charts/chart_synthetic.svg").exists());
    run(&["export-windows", "--seq", "clean", "--out", "win"]);
    assert!(d.join("win/windows.bin").exists());
}

#[test]
fn bad_config_exits_nonzero_and_lists_problems() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "scenario = \"foggy\"\n[vio]\nepochs = 0\n").unwrap();
    let out = duvio(&["--config", "bad.toml", "run"], tmp.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("foggy") && err.contains("vio.epochs"), "{err}");
}

#[test]
fn failing_stage_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    // an 8-layer discriminator cannot take 32x16 frames
    let cfg = format!("{VIO}\n[synthetic]\nsequences = 2\nduration = 1.0\nwidth = 32\nheight = 16\n")
        .replace("layers = 3", "layers = 8");
    std::fs::write(tmp.path().join("c.toml"), cfg).unwrap();
    let out = duvio(&["--config", "c.toml", "--seed", "1", "run"], tmp.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dehaze-train"), "{err}");
    assert!(tmp.path().join("runs/duvio/provenance.json").exists());
}

use std::path::Path;
use std::process::{Command, Output};

fn lcdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcdepth"))
        .args(args)
        .env_remove("LCDEPTH_WORKERS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[rustfmt::skip]
const TINY: &[&str] = &[
    "--data.pairs", "2",
    "--data.scenes", "3",
    "--data.scene.height", "16",
    "--data.scene.width", "16",
    "--model.denoiser.base_width", "4",
    "--model.denoiser.level_widths", "[4]",
    "--model.denoiser.groups", "2",
    "--model.denoiser.token_dim", "8",
    "--model.denoiser.time_hidden", "8",
    "--model.denoiser.time_dim", "8",
    "--train.iterations", "3",
    "--train.warmup", "1",
    "--train.micro_batch", "1",
    "--train.accumulation", "1",
    "--holdout.pairs", "1",
    "--holdout.scenes", "1",
    "--infer.steps", "2",
    "--converge.steps", "2",
];

fn run_tiny(args: &[&str]) -> Output {
    let all: Vec<&str> = args.iter().chain(TINY).copied().collect();
    lcdepth(&all)
}

fn gen_tiny(dir: &Path) -> String {
    let data = dir.join("data").to_string_lossy().into_owned();
    let o = run_tiny(&["gen", "--out", &data]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data
}

#[test]
fn schedule_dump_worked_example() {
    let o = lcdepth(&["schedule", "dump", "--T", "2", "--kind", "linear", "--beta-start", "0.1", "--beta-end", "0.2"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,beta,alpha,alpha_bar"));
    let ab: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ab.len(), 2);
    assert!((ab[0] - 0.9).abs() < 1e-15 && (ab[1] - 0.72).abs() < 1e-15, "{ab:?}");
    // Dotted keys work too.
    let o = lcdepth(&["schedule", "dump", "--model.schedule.timesteps", "3"]);
    assert_eq!(stdout(&o).lines().count(), 4);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let o = lcdepth(&["gen", "--out", "x", "--no-such-flag"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&lcdepth(&[])), 2);
    assert_eq!(code(&lcdepth(&["schedule", "dump", "--T", "0"])), 2);
    assert_eq!(code(&lcdepth(&["schedule", "dump", "--train.lr0", "-1"])), 2);
    assert_eq!(code(&lcdepth(&["schedule", "dump", "--infer.caption_mode", "template:nope"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"lr": 1}}"#).unwrap();
    assert_eq!(code(&lcdepth(&["schedule", "dump", "--config", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&lcdepth(&["schedule", "dump", "--config", "/definitely/missing.json"])), 2);
    assert_eq!(code(&lcdepth(&["--help"])), 0);
}

#[test]
fn worker_override_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_lcdepth"))
        .args(["schedule", "dump"])
        .env("LCDEPTH_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_data_exits_3_and_divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run_tiny(&["train", "--data", "/definitely/missing", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let data = gen_tiny(dir.path());
    let o = run_tiny(&[
        "train", "--data", &data, "--out", out.to_str().unwrap(), "--train.lr0", "1e30", "--train.iterations", "30",
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn selftest_passes() {
    let o = lcdepth(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{text}");
}

#[test]
fn train_eval_ablate_converge() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let o = run_tiny(&["train", "--data", &data, "--out", &p("run")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = p("run/ckpt-000003.pdck");

    let o = run_tiny(&["eval", "--checkpoint", &ck, "--data", &data, "--out", &p("eval"), "--split", "pairs"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(p("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("image_id,alpha,beta,method,delta1_pct,absrel,valid_px\n"));
    assert_eq!(metrics.lines().count(), 4);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("eval/report.json")).unwrap()).unwrap();
    // The aggregate is the mean of the rows.
    let rows = report["records"].as_array().unwrap();
    let mean = rows.iter().map(|r| r["absrel"].as_f64().unwrap()).sum::<f64>() / rows.len() as f64;
    assert!((report["aggregate"]["absrel"].as_f64().unwrap() - mean).abs() < 1e-12);
    for key in ["config", "build", "wall_seconds"] {
        assert!(!report[key].is_null(), "{key}");
    }
    assert!(Path::new(&p("eval/depth/pair-00001-a.pgm")).exists());
    assert!(Path::new(&p("eval/ordering.csv")).exists());

    let o = run_tiny(&["ablate", "--checkpoint", &ck, "--data", &data, "--out", &p("ablate")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(p("ablate/ablation.csv")).unwrap();
    let modes: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes[..2], ["dataset", "blank"]);
    assert_eq!(modes.len(), 6);
    assert!(table.contains("A complex 3D scene with varing objects at different distances."));

    let o = run_tiny(&["converge", "--data", &data, "--out", &p("curve"), "--converge.eval_interval", "100"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curve = std::fs::read_to_string(p("curve/curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "iteration,delta1,absrel");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("3,"));

    let image = format!("{data}/scene-00000.ppm");
    let o = run_tiny(&["infer", "--checkpoint", &ck, "--image", &image, "--out", &p("infer"), "--infer.caption_mode", "blank"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&p("infer/scene-00000.pdr")).exists());
    let o = run_tiny(&["infer", "--checkpoint", &ck, "--image", &image, "--out", &p("infer")]);
    assert_eq!(code(&o), 2, "dataset caption mode without a dataset");
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::json;

use lcdepth::config::{self, Config};
use lcdepth::pipeline::{self, CaptionMode, InferenceConfig, RunReport};
use lcdepth::raster::{self, Raster};
use lcdepth::scenegen::{self, Sample};
use lcdepth::templates::Templates;
use lcdepth::trainer::{self, TrainHooks, TrainLogRecord};
use lcdepth::vocab::Vocabulary;
use lcdepth::{experiment, oracles, Error};

/// The one environment variable read: overrides `infer.workers`.
const WORKERS_ENV: &str = "LCDEPTH_WORKERS";

/// Short flags of `schedule dump` and the keys they set.
const SCHEDULE_ALIASES: [(&str, &str); 4] = [
    ("T", "model.schedule.timesteps"),
    ("kind", "model.schedule.kind"),
    ("beta-start", "model.schedule.beta_start"),
    ("beta-end", "model.schedule.beta_end"),
];

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn split_arg(default: &'static str) -> Arg {
    Arg::new("split")
        .long("split")
        .value_parser(["all", "train", "pairs", "scenes"])
        .default_value(default)
        .help("Which part of the dataset to use; pairs/scenes are the held-out sets")
}

fn with_config_flags(cmd: Command, keys: &[String]) -> Command {
    let cmd = cmd.args_override_self(true).arg(path_arg("config", "JSON configuration file"));
    keys.iter().fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(key.clone())
                .long(key.clone())
                .value_name("VALUE")
                .allow_negative_numbers(true)
                .hide(true)
                .help("Override of a config key"),
        )
    })
}

fn cli() -> Command {
    let keys = config::leaf_keys();
    let sub = |name: &'static str, about: &'static str| with_config_flags(Command::new(name).about(about), &keys);
    let schedule_dump = SCHEDULE_ALIASES.iter().fold(
        sub("dump", "Print the noise schedule as t,beta,alpha,alpha_bar CSV"),
        |cmd, (flag, key)| cmd.arg(Arg::new(*flag).long(*flag).value_name("VALUE").allow_negative_numbers(true).help(format!("Same as --{key}"))),
    );
    Command::new("lcdepth")
        .about("Caption-conditioned latent diffusion depth estimation")
        .version(env!("CARGO_PKG_VERSION"))
        .after_help("Every configuration key is also a flag: --<dotted.key> <value>, e.g. --train.lr0 1e-3.")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("gen", "Generate the synthetic dataset").arg(path_arg("out", "Dataset directory").required(true)))
        .subcommand(
            sub("train", "Train a denoiser")
                .arg(path_arg("data", "Dataset directory").required(true))
                .arg(path_arg("out", "Run directory for checkpoints and the log").required(true))
                .arg(path_arg("resume", "Checkpoint to continue from"))
                .arg(split_arg("train")),
        )
        .subcommand(
            sub("infer", "Predict normalized depth for one image")
                .arg(path_arg("checkpoint", "Model checkpoint").required(true))
                .arg(path_arg("image", "Input PPM image").required(true))
                .arg(path_arg("out", "Output directory").required(true))
                .arg(Arg::new("caption").long("caption").help("Caption text (sets caption mode 'provided')")),
        )
        .subcommand(
            sub("eval", "Evaluate a checkpoint on a dataset")
                .arg(path_arg("checkpoint", "Model checkpoint").required(true))
                .arg(path_arg("data", "Dataset directory").required(true))
                .arg(path_arg("out", "Report directory").required(true))
                .arg(split_arg("all"))
                .arg(Arg::new("no-depth").long("no-depth").action(ArgAction::SetTrue).help("Skip per-image depth files")),
        )
        .subcommand(
            sub("ablate", "One evaluation per caption mode, as a single table")
                .arg(path_arg("checkpoint", "Model checkpoint").required(true))
                .arg(path_arg("data", "Dataset directory").required(true))
                .arg(path_arg("out", "Report directory").required(true))
                .arg(split_arg("pairs")),
        )
        .subcommand(
            sub("converge", "Train while logging held-out AbsRel/delta1 (converge.blank for the blank run)")
                .arg(path_arg("data", "Dataset directory").required(true))
                .arg(path_arg("out", "Run directory").required(true)),
        )
        .subcommand(
            sub("experiment", "Caption vs blank disambiguation experiment over several seeds")
                .arg(path_arg("out", "Result directory").required(true))
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_delimiter(',')
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0,1,2"),
                ),
        )
        .subcommand(
            Command::new("schedule")
                .about("Noise schedule tools")
                .subcommand_required(true)
                .subcommand(schedule_dump),
        )
        .subcommand(sub("selftest", "Run the oracle suites"))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match run(&matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Config file, then the worker override, then flags.
fn load_config(m: &ArgMatches) -> anyhow::Result<Config> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        cfg = cfg.with_overrides([("infer.workers", v.as_str())])?;
    }
    let mut overrides: Vec<(String, String)> = Vec::new();
    for key in config::leaf_keys() {
        if let Ok(Some(v)) = m.try_get_one::<String>(&key) {
            overrides.push((key, v.clone()));
        }
    }
    for (flag, key) in SCHEDULE_ALIASES {
        if let Ok(Some(v)) = m.try_get_one::<String>(flag) {
            overrides.push((key.to_string(), v.clone()));
        }
    }
    Ok(cfg.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required by clap")
}

fn run(m: &ArgMatches) -> anyhow::Result<ExitCode> {
    let (name, sub) = m.subcommand().expect("subcommand_required");
    let (name, sub) = match (name, sub.subcommand()) {
        ("schedule", Some(("dump", d))) => ("schedule dump", d),
        other => (other.0, sub),
    };
    let cfg = load_config(sub)?;
    match name {
        "gen" => gen(&cfg, path(sub, "out")),
        "train" => train(&cfg, sub),
        "infer" => infer(&cfg, sub),
        "eval" => eval(&cfg, sub),
        "ablate" => ablate(&cfg, sub),
        "converge" => converge(&cfg, path(sub, "data"), path(sub, "out")),
        "experiment" => run_experiment(&cfg, sub),
        "schedule dump" => {
            print!("{}", cfg.model.schedule.build()?.to_csv());
            Ok(ExitCode::SUCCESS)
        }
        "selftest" => Ok(selftest()),
        other => bail!("unhandled subcommand {other}"),
    }
}

fn selftest() -> ExitCode {
    let checks = oracles::all();
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} suites passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn gen(cfg: &Config, out: &Path) -> anyhow::Result<ExitCode> {
    let samples = scenegen::generate_samples(&cfg.data, cfg.seed)?;
    let manifest = scenegen::write_dataset(&samples, out)?;
    write(&out.join("config.json"), &cfg.to_json())?;
    println!("wrote {} samples to {}", manifest.entries.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

/// Loads the dataset and selects one split of it.
fn load_split(cfg: &Config, dir: &Path, split: &str) -> anyhow::Result<(Vec<Sample>, Vocabulary)> {
    let data = scenegen::read_dataset(dir)?;
    let samples = data.load_all()?;
    let (train, pairs, scenes) = pipeline::holdout(&samples, cfg.holdout.pairs, cfg.holdout.scenes);
    let chosen = match split {
        "all" => samples,
        "train" => train,
        "pairs" => pairs,
        _ => scenes,
    };
    if chosen.is_empty() {
        return Err(Error::InvalidData(format!("split {split:?} of {} is empty", dir.display())).into());
    }
    Ok((chosen, data.vocab))
}

fn split(m: &ArgMatches) -> &str {
    m.get_one::<String>("split").expect("has a default")
}

fn print_progress(r: &TrainLogRecord) {
    if let Some((d1, ar)) = r.validation {
        println!("iteration {} loss {:.5} delta1 {d1:.2} absrel {ar:.4}", r.iteration, r.loss);
    } else if r.iteration % 100 == 0 {
        println!("iteration {} loss {:.5} lr {:.3e}", r.iteration, r.loss, r.lr);
    }
}

fn train(cfg: &Config, m: &ArgMatches) -> anyhow::Result<ExitCode> {
    let (samples, vocab) = load_split(cfg, path(m, "data"), split(m))?;
    let out = path(m, "out");
    create_dir(out)?;
    write(&out.join("config.json"), &cfg.to_json())?;
    let mut progress = print_progress;
    let hooks = TrainHooks {
        resume: m.get_one::<PathBuf>("resume").cloned(),
        validate: None,
        progress: Some(&mut progress),
    };
    let outcome = trainer::train(&cfg.model, &cfg.train, &samples, &vocab, out, hooks)?;
    println!("final checkpoint {}", outcome.final_checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn load_model(p: &Path) -> anyhow::Result<(lcdepth::denoiser::Denoiser<f32>, lcdepth::schedule::NoiseSchedule, trainer::Checkpoint)> {
    let ck = trainer::load_checkpoint(p)?;
    Ok((ck.denoiser()?, ck.schedule()?, ck))
}

fn infer(cfg: &Config, m: &ArgMatches) -> anyhow::Result<ExitCode> {
    let (model, schedule, _) = load_model(path(m, "checkpoint"))?;
    let image = raster::read_ppm(path(m, "image"))?;
    let mut icfg = cfg.infer.clone();
    if let Some(c) = m.get_one::<String>("caption") {
        icfg.caption = Some(c.clone());
        icfg.caption_mode = CaptionMode::Provided;
    }
    if icfg.caption_mode == CaptionMode::Dataset {
        return Err(Error::Config("caption mode 'dataset' needs a dataset; pass --caption or another infer.caption_mode".into()).into());
    }
    let templates = Templates::shipped();
    icfg.validate(&templates)?;
    let caption = icfg.caption_for("", &templates)?;
    let tokens = Vocabulary::shipped().tokenize(caption);
    let id = path(m, "image").file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let depth = pipeline::infer(&image, &tokens, &model, &schedule, icfg.steps, pipeline::noise_seed(icfg.seed, &id))?;
    let out = path(m, "out");
    create_dir(out)?;
    write_depth(out, &id, &depth, &vec![true; depth.data.len()])?;
    println!("wrote {}", out.join(format!("{id}.pdr")).display());
    Ok(ExitCode::SUCCESS)
}

/// `{id}.pdr` (float32 normalized depth) and `{id}.pgm` / `{id}.ppm` views.
fn write_depth(dir: &Path, id: &str, depth: &Raster<f64>, mask: &[bool]) -> lcdepth::Result<()> {
    raster::write_pdr(&dir.join(format!("{id}.pdr")), &depth.map(|v| v as f32))?;
    pipeline::visualize(depth, mask, &dir.join(format!("{id}.pgm")), true)?;
    Ok(())
}

fn report_json(report: &RunReport, cfg: &Config, checkpoint: &Path, seconds: f64) -> serde_json::Value {
    json!({
        "mode": report.mode.to_string(),
        "records": report.records,
        "aggregate": report.aggregate.map(|a| json!({
            "delta1_pct": a.delta1_pct,
            "absrel": a.absrel,
            "valid_px": a.valid_px,
            "images": a.images,
        })),
        "failures": report.failures.iter().map(|(id, e)| json!({"image_id": id, "error": e})).collect::<Vec<_>>(),
        "ordering_accuracy_pct": report.ordering_accuracy(),
        "checkpoint": checkpoint.display().to_string(),
        "config": serde_json::to_value(cfg).expect("config serializes"),
        "build": format!("lcdepth {}", env!("CARGO_PKG_VERSION")),
        "wall_seconds": seconds,
    })
}

fn eval(cfg: &Config, m: &ArgMatches) -> anyhow::Result<ExitCode> {
    let clock = Instant::now();
    let ck_path = path(m, "checkpoint");
    let (model, schedule, _) = load_model(ck_path)?;
    let (samples, vocab) = load_split(cfg, path(m, "data"), split(m))?;
    let out = path(m, "out");
    let depth_dir = out.join("depth");
    let keep_depth = !m.get_flag("no-depth");
    create_dir(if keep_depth { &depth_dir } else { out })?;
    let templates = Templates::shipped();
    let report = pipeline::evaluate_run_with(&samples, &model, &schedule, &cfg.infer, &templates, &vocab, |s, d| {
        if keep_depth {
            write_depth(&depth_dir, &s.id, d, &s.mask_bool())?;
        }
        Ok(())
    })?;
    if report.records.is_empty() {
        return Err(Error::numeric("evaluation", "every image failed").into());
    }
    write(&out.join("metrics.csv"), &report.metrics_csv()?)?;
    if !report.ordering.is_empty() {
        write(&out.join("ordering.csv"), &report.ordering_csv())?;
    }
    let seconds = clock.elapsed().as_secs_f64();
    let doc = report_json(&report, cfg, ck_path, seconds);
    write(&out.join("report.json"), &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    let a = report.aggregate.expect("records are non-empty");
    println!("{} images: delta1 {:.2}% absrel {:.4}", a.images, a.delta1_pct, a.absrel);
    if let Some(acc) = report.ordering_accuracy() {
        println!("ordering accuracy {acc:.1}% over {} ambiguity images", report.ordering.len());
    }
    if !report.failures.is_empty() {
        println!("{} images failed and are excluded from the aggregate", report.failures.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(cfg: &Config, m: &ArgMatches) -> anyhow::Result<ExitCode> {
    let (model, schedule, ck) = load_model(path(m, "checkpoint"))?;
    let (samples, vocab) = load_split(cfg, path(m, "data"), split(m))?;
    let templates = Templates::shipped();
    let reports = pipeline::ablate(&samples, &model, &schedule, &cfg.infer, &templates, &vocab)?;
    let table = pipeline::ablation_csv(&reports, &templates, ck.train.as_ref().map(|t| t.caption_dropout));
    let out = path(m, "out");
    create_dir(out)?;
    write(&out.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn converge(cfg: &Config, data: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    let (samples, vocab) = load_split(cfg, data, "all")?;
    let (train_set, _, eval_scenes) = pipeline::holdout(&samples, cfg.holdout.pairs, cfg.holdout.scenes);
    if train_set.is_empty() || eval_scenes.is_empty() {
        return Err(Error::InvalidData("holdout leaves an empty training or evaluation split".into()).into());
    }
    let mut train_cfg = cfg.train.clone();
    let mut icfg = InferenceConfig {
        steps: cfg.converge.steps,
        ..cfg.infer.clone()
    };
    if cfg.converge.blank {
        train_cfg.caption_dropout = 1.0;
        icfg.caption_mode = CaptionMode::Blank;
    }
    create_dir(out)?;
    write(&out.join("config.json"), &cfg.to_json())?;
    let mut progress = print_progress;
    let (curve, _) = pipeline::convergence_log(
        &cfg.model,
        &train_cfg,
        &train_set,
        &eval_scenes,
        cfg.converge.eval_interval,
        &icfg,
        &Templates::shipped(),
        &vocab,
        out,
        Some(&mut progress),
    )?;
    write(&out.join("curve.csv"), &pipeline::curve_csv(&curve))?;
    match pipeline::first_reaching(&curve, experiment::ABSREL_TARGET) {
        Some(it) => println!("absrel <= {} first at iteration {it}", experiment::ABSREL_TARGET),
        None => println!("absrel never reached {}", experiment::ABSREL_TARGET),
    }
    Ok(ExitCode::SUCCESS)
}

fn run_experiment(cfg: &Config, m: &ArgMatches) -> anyhow::Result<ExitCode> {
    let seeds: Vec<u64> = m.get_many::<u64>("seeds").context("seeds")?.copied().collect();
    let out = path(m, "out");
    let summary = experiment::run(cfg, &seeds, out, &mut |line| println!("{line}"))?;
    write(&out.join("config.json"), &cfg.to_json())?;
    print!("{}", summary.csv());
    Ok(ExitCode::SUCCESS)
}

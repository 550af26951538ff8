//! Caption-vs-blank disambiguation experiment.
//!
//! Per seed: generate the dataset, hold out the last pairs and scenes, train
//! a caption model and a blank model (every caption dropped) while logging
//! AbsRel/delta1 curves on the held-out scenes, then score left/right
//! ordering on the held-out pairs. Results are summarized by the median over
//! seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::{self, CaptionMode, CurvePoint, InferenceConfig, RunReport};
use crate::scenegen::{generate_samples, Sample};
use crate::templates::Templates;
use crate::trainer::{TrainConfig, TrainLogRecord};
use crate::vocab::Vocabulary;

/// AbsRel the curves are read against.
pub const ABSREL_TARGET: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub curve: Vec<CurvePoint>,
    /// Ordering accuracy on the held-out pairs, percent.
    pub ordering_pct: f64,
    /// First curve iteration with AbsRel at or below [`ABSREL_TARGET`].
    pub reach: Option<usize>,
    pub report: RunReport,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub caption: ArmResult,
    pub blank: ArmResult,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub seeds: Vec<SeedResult>,
    pub caption_ordering_pct: f64,
    pub blank_ordering_pct: f64,
    /// Median first-reaching iteration; `None` when the median run never got there.
    pub caption_reach: Option<usize>,
    pub blank_reach: Option<usize>,
    pub seconds: f64,
}

impl Summary {
    /// Seed whose caption ordering accuracy is the median one.
    pub fn median_seed(&self) -> &SeedResult {
        let mut idx: Vec<usize> = (0..self.seeds.len()).collect();
        idx.sort_by(|&a, &b| {
            self.seeds[a]
                .caption
                .ordering_pct
                .total_cmp(&self.seeds[b].caption.ordering_pct)
                .then(self.seeds[a].seed.cmp(&self.seeds[b].seed))
        });
        &self.seeds[idx[(idx.len() - 1) / 2]]
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("seed,caption_ordering_pct,blank_ordering_pct,caption_reach,blank_reach,seconds\n");
        let reach = |r: Option<usize>| r.map(|v| v.to_string()).unwrap_or_default();
        for s in &self.seeds {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.1}",
                s.seed,
                s.caption.ordering_pct,
                s.blank.ordering_pct,
                reach(s.caption.reach),
                reach(s.blank.reach),
                s.seconds
            );
        }
        let _ = writeln!(
            out,
            "median,{},{},{},{},{:.1}",
            self.caption_ordering_pct,
            self.blank_ordering_pct,
            reach(self.caption_reach),
            reach(self.blank_reach),
            self.seconds
        );
        out
    }
}

/// Median of an odd or even count (mean of the middle two).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median iteration with "never reached" ranked after every iteration.
pub fn median_reach(values: &[Option<usize>]) -> Option<usize> {
    let mut v = values.to_vec();
    v.sort_by_key(|r| r.unwrap_or(usize::MAX));
    v[(v.len() - 1) / 2]
}

/// One training arm: curve while training, then ordering at `cfg.infer.steps`.
#[allow(clippy::too_many_arguments)]
fn run_arm(
    cfg: &Config,
    seed: u64,
    dropout: f64,
    mode: CaptionMode,
    train_set: &[Sample],
    eval_pairs: &[Sample],
    eval_scenes: &[Sample],
    out_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<ArmResult> {
    let templates = Templates::shipped();
    let vocab = Vocabulary::shipped();
    let train_cfg = TrainConfig {
        caption_dropout: dropout,
        seed,
        ..cfg.train.clone()
    };
    let curve_cfg = InferenceConfig {
        steps: cfg.converge.steps,
        caption_mode: mode.clone(),
        ..cfg.infer.clone()
    };
    let mut progress = |r: &TrainLogRecord| {
        if let Some((d1, ar)) = r.validation {
            log(&format!(
                "  {mode} it {} loss {:.4} delta1 {d1:.2} absrel {ar:.4} ({:.0}s)",
                r.iteration, r.loss, r.seconds
            ));
        }
    };
    let (curve, outcome) = pipeline::convergence_log(
        &cfg.model,
        &train_cfg,
        train_set,
        eval_scenes,
        cfg.converge.eval_interval,
        &curve_cfg,
        &templates,
        &vocab,
        out_dir,
        Some(&mut progress),
    )?;
    let schedule = cfg.model.schedule.build()?;
    let order_cfg = InferenceConfig {
        caption_mode: mode.clone(),
        ..cfg.infer.clone()
    };
    let report = pipeline::evaluate_run(eval_pairs, &outcome.model, &schedule, &order_cfg, &templates, &vocab)?;
    let ordering_pct = report
        .ordering_accuracy()
        .ok_or_else(|| Error::InvalidData("held-out pairs produced no ordering decisions".into()))?;
    log(&format!("  {mode} ordering {ordering_pct:.1}%"));
    Ok(ArmResult {
        reach: pipeline::first_reaching(&curve, ABSREL_TARGET),
        curve,
        ordering_pct,
        report,
        checkpoint: outcome.final_checkpoint,
    })
}

/// Runs both arms for every seed, writing per-seed curves and ordering
/// tables plus `summary.csv` into `out_dir`.
pub fn run(cfg: &Config, seeds: &[u64], out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<Summary> {
    if seeds.is_empty() {
        return Err(Error::Config("the experiment needs at least one seed".into()));
    }
    let clock = Instant::now();
    let write = |name: String, text: &str| std::fs::write(out_dir.join(&name), text).map_err(|e| Error::io(out_dir.join(&name), e));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut results = Vec::new();
    for &seed in seeds {
        let start = Instant::now();
        log(&format!("seed {seed}"));
        let samples = generate_samples(&cfg.data, seed)?;
        let (train_set, eval_pairs, eval_scenes) = pipeline::holdout(&samples, cfg.holdout.pairs, cfg.holdout.scenes);
        if eval_pairs.is_empty() || eval_scenes.is_empty() {
            return Err(Error::Config("holdout leaves no pairs or no scenes to evaluate".into()));
        }
        let arm = |name: &str, dropout: f64, mode: CaptionMode, log: &mut dyn FnMut(&str)| {
            let dir = out_dir.join(format!("seed{seed}-{name}"));
            let r = run_arm(cfg, seed, dropout, mode, &train_set, &eval_pairs, &eval_scenes, &dir, log)?;
            write(format!("curve-seed{seed}-{name}.csv"), &pipeline::curve_csv(&r.curve))?;
            write(format!("ordering-seed{seed}-{name}.csv"), &r.report.ordering_csv())?;
            Ok::<_, Error>(r)
        };
        let caption = arm("caption", cfg.train.caption_dropout, CaptionMode::Dataset, log)?;
        let blank = arm("blank", 1.0, CaptionMode::Blank, log)?;
        results.push(SeedResult {
            seed,
            caption,
            blank,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let pick = |f: &dyn Fn(&SeedResult) -> f64| median(&results.iter().map(f).collect::<Vec<_>>());
    let reach = |f: &dyn Fn(&SeedResult) -> Option<usize>| median_reach(&results.iter().map(f).collect::<Vec<_>>());
    let summary = Summary {
        caption_ordering_pct: pick(&|s| s.caption.ordering_pct),
        blank_ordering_pct: pick(&|s| s.blank.ordering_pct),
        caption_reach: reach(&|s| s.caption.reach),
        blank_reach: reach(&|s| s.blank.reach),
        seconds: clock.elapsed().as_secs_f64(),
        seeds: results,
    };
    write("summary.csv".into(), &summary.csv())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert_eq!(median_reach(&[Some(500), None, Some(250)]), Some(500));
        assert_eq!(median_reach(&[None, None, Some(250)]), None);
    }

    #[test]
    fn tiny_experiment_writes_its_tables() {
        let mut cfg = Config::default()
            .with_overrides([
                ("data.pairs", "3"),
                ("data.scenes", "3"),
                ("data.scene.height", "16"),
                ("data.scene.width", "16"),
                ("model.denoiser.base_width", "4"),
                ("model.denoiser.level_widths", "[4]"),
                ("model.denoiser.groups", "2"),
                ("model.denoiser.token_dim", "8"),
                ("model.denoiser.time_hidden", "8"),
                ("model.denoiser.time_dim", "8"),
                ("train.iterations", "2"),
                ("train.micro_batch", "1"),
                ("train.accumulation", "1"),
                ("holdout.pairs", "1"),
                ("holdout.scenes", "1"),
                ("converge.eval_interval", "1"),
                ("converge.steps", "2"),
                ("infer.steps", "2"),
            ])
            .unwrap();
        cfg.train.warmup = 1;
        let dir = tempfile::tempdir().unwrap();
        let s = run(&cfg, &[0, 1, 2], dir.path(), &mut |_| {}).unwrap();
        assert_eq!(s.seeds.len(), 3);
        assert_eq!(s.seeds[0].caption.curve.len(), 2);
        assert_eq!(s.seeds[0].blank.report.ordering.len(), 2);
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 5);
        assert!(dir.path().join("curve-seed1-blank.csv").exists());
        assert!(dir.path().join("ordering-seed2-caption.csv").exists());
    }
}

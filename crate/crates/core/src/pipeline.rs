//! Inference, evaluation, caption ablations, convergence curves and depth
//! visualization.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{self, LatentTensor, Provenance};
use crate::denoiser::{Denoiser, Parameterization};
use crate::depthmetrics::{aggregate, evaluate_pair, metrics_csv, AlignMethod, Aggregate, MetricsRecord};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::{self, label_of, tag};
use crate::scenegen::{AmbiguityTag, Sample};
use crate::schedule::{self, NoiseSchedule};
use crate::templates::Templates;
use crate::tensor::Tensor;
use crate::trainer::{self, ModelConfig, TrainConfig, TrainHooks, TrainLogRecord, TrainOutcome};
use crate::vocab::{TokenSequence, Vocabulary};

const MAGMA: &str = include_str!("../data/magma.csv");

/// Where the conditioning caption comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CaptionMode {
    /// The caption given alongside the image (`infer --caption`).
    Provided,
    Dataset,
    Blank,
    /// A named prompt from the template file.
    Template(String),
}

impl fmt::Display for CaptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaptionMode::Provided => f.write_str("provided"),
            CaptionMode::Dataset => f.write_str("dataset"),
            CaptionMode::Blank => f.write_str("blank"),
            CaptionMode::Template(n) => write!(f, "template:{n}"),
        }
    }
}

impl FromStr for CaptionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "provided" => Ok(CaptionMode::Provided),
            "dataset" => Ok(CaptionMode::Dataset),
            "blank" => Ok(CaptionMode::Blank),
            _ => match s.strip_prefix("template:") {
                Some(n) if !n.is_empty() => Ok(CaptionMode::Template(n.to_string())),
                _ => Err(Error::Config(format!(
                    "unknown caption mode {s:?} (provided, dataset, blank, template:<name>)"
                ))),
            },
        }
    }
}

impl Serialize for CaptionMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CaptionMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub steps: usize,
    pub seed: u64,
    pub caption_mode: CaptionMode,
    /// Caption used by `CaptionMode::Provided`.
    pub caption: Option<String>,
    pub align: AlignMethod,
    /// Evaluation threads; 0 uses the available parallelism. Results do not
    /// depend on it.
    pub workers: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            seed: 0,
            caption_mode: CaptionMode::Dataset,
            caption: None,
            align: AlignMethod::L1,
            workers: 1,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, templates: &Templates) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling steps must be at least 1".into()));
        }
        if let CaptionMode::Template(n) = &self.caption_mode {
            if templates.prompt(n).is_none() {
                return Err(Error::Config(format!("no template prompt named {n:?}")));
            }
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        match self.workers {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }

    /// Caption text for a sample under this mode.
    pub fn caption_for<'a>(&'a self, sample_caption: &'a str, templates: &'a Templates) -> Result<&'a str> {
        match &self.caption_mode {
            CaptionMode::Provided => self
                .caption
                .as_deref()
                .ok_or_else(|| Error::Config("caption mode 'provided' needs a caption".into())),
            CaptionMode::Dataset => Ok(sample_caption),
            CaptionMode::Blank => Ok(""),
            CaptionMode::Template(n) => templates
                .prompt(n)
                .ok_or_else(|| Error::Config(format!("no template prompt named {n:?}"))),
        }
    }
}

/// Seed of the initial-noise stream for an image. Depends on the image id
/// only, so every caption mode starts from the same `z_T`.
pub fn noise_seed(seed: u64, image_id: &str) -> u64 {
    rng::derive_seed(seed, &[tag::INFER, label_of(image_id)])
}

/// Deterministic DDIM sampling from `z_T` with S steps. `eps_hat(z, t)`
/// returns the noise estimate at `(z, t)`.
pub fn ddim_sample<P>(z_t: Vec<f64>, schedule: &NoiseSchedule, steps: usize, mut eps_hat: P) -> Result<Vec<f64>>
where
    P: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let seq = schedule::make_ddim_subsequence(schedule.timesteps(), steps)?;
    let mut z = z_t;
    for (k, (t, t_prev)) in schedule::ddim_pairs(&seq).into_iter().enumerate() {
        let e = eps_hat(&z, t)?;
        z = schedule::ddim_step(&z, &e, t, t_prev, schedule)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("sampling step {k} (t={t})"), "non-finite latent"));
        }
    }
    Ok(z)
}

/// Noise estimate of the network, converting v-predictions.
pub fn model_eps(
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    x_latent: &Tensor<f32>,
    tokens: &TokenSequence,
    z: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    let shape = [1, model.config.latent_channels, x_latent.shape()[2], x_latent.shape()[3]];
    let zt = Tensor::new(&shape, z.iter().map(|&v| v as f32).collect())?;
    let out = model.forward(&zt, x_latent, &[t], std::slice::from_ref(tokens))?;
    let pred: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
    match model.config.prediction {
        Parameterization::Epsilon => Ok(pred),
        Parameterization::V => schedule::eps_from_v(&pred, z, t, schedule),
    }
}

/// Normalized relative depth (`H x W x 1`) for one image.
pub fn infer(
    image: &Raster<f32>,
    tokens: &TokenSequence,
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    steps: usize,
    noise_seed: u64,
) -> Result<Raster<f64>> {
    let xl = codec::encode_image(image)?;
    let c = model.config.latent_channels;
    if xl.channels != model.config.image_channels {
        return Err(Error::Shape(format!(
            "image latent has {} channels, the model expects {}",
            xl.channels, model.config.image_channels
        )));
    }
    let (h, w) = (xl.height, xl.width);
    let x = Tensor::new(&[1, xl.channels, h, w], xl.to_planes().into_iter().map(|v| v as f32).collect())?;
    let z_t = rng::standard_normal(&mut rng::stream(noise_seed, &[]), c * h * w);
    let z0 = ddim_sample(z_t, schedule, steps, |z, t| model_eps(model, schedule, &x, tokens, z, t))?;
    let latent = LatentTensor::from_planes(h, w, c, &z0, Provenance::DepthLatent)?;
    codec::decode(&latent)
}

/// Signed difference `mean(left) - mean(right)` of `pred` over the object
/// pixels of an ambiguity scene, split at the vertical center line. Object
/// pixels are those nearer than the background in the ground truth.
pub fn left_right_difference(pred: &[f64], gt: &[f64], width: usize) -> Option<f64> {
    let background = gt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut sl, mut nl, mut sr, mut nr) = (0.0, 0usize, 0.0, 0usize);
    for (k, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if g >= background {
            continue;
        }
        if 2 * (k % width) < width {
            sl += p;
            nl += 1;
        } else {
            sr += p;
            nr += 1;
        }
    }
    (nl > 0 && nr > 0).then(|| sl / nl as f64 - sr / nr as f64)
}

/// Whether a prediction orders the two rectangles as the tag says. Ties count
/// as wrong.
pub fn ordering_correct(tag: AmbiguityTag, diff: f64) -> Option<bool> {
    match tag {
        AmbiguityTag::LeftNear => Some(diff < 0.0),
        AmbiguityTag::RightNear => Some(diff > 0.0),
        AmbiguityTag::None => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub mode: CaptionMode,
    pub records: Vec<MetricsRecord>,
    /// `None` when every image failed.
    pub aggregate: Option<Aggregate>,
    /// `(image id, error)` for images excluded from the aggregate.
    pub failures: Vec<(String, String)>,
    /// `(image id, left-minus-right difference, correct)` for ambiguity scenes.
    pub ordering: Vec<(String, f64, bool)>,
    pub seconds: f64,
}

impl RunReport {
    pub fn ordering_accuracy(&self) -> Option<f64> {
        if self.ordering.is_empty() {
            return None;
        }
        let ok = self.ordering.iter().filter(|o| o.2).count();
        Some(100.0 * ok as f64 / self.ordering.len() as f64)
    }

    pub fn metrics_csv(&self) -> Result<String> {
        metrics_csv(&self.records)
    }

    pub fn ordering_csv(&self) -> String {
        let mut out = String::from("image_id,left_minus_right,correct\n");
        for (id, d, ok) in &self.ordering {
            let _ = writeln!(out, "{id},{d},{}", *ok as u8);
        }
        out
    }
}

/// Runs inference on every sample (in image-id order) and scores it against
/// the metric ground truth. `sink` receives each prediction.
pub fn evaluate_run_with(
    samples: &[Sample],
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    cfg: &InferenceConfig,
    templates: &Templates,
    vocab: &Vocabulary,
    mut sink: impl FnMut(&Sample, &Raster<f64>) -> Result<()>,
) -> Result<RunReport> {
    if samples.is_empty() {
        return Err(Error::InvalidData("evaluation set is empty".into()));
    }
    cfg.validate(templates)?;
    let clock = std::time::Instant::now();
    let mut order: Vec<&Sample> = samples.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let preds = parallel_map(&order, cfg.worker_count(), |s| {
        let tokens = vocab.tokenize(cfg.caption_for(&s.caption, templates)?);
        infer(&s.image, &tokens, model, schedule, cfg.steps, noise_seed(cfg.seed, &s.id))
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut ordering = Vec::new();
    for (s, pred) in order.into_iter().zip(preds) {
        let pred = match pred {
            Ok(p) => p,
            Err(e @ Error::Numeric { .. }) => {
                failures.push((s.id.clone(), e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        sink(s, &pred)?;
        let gt = s.depth_f64();
        match evaluate_pair(&pred.data, &gt, &s.mask_bool(), cfg.align) {
            Ok(mut r) => {
                r.image_id = s.id.clone();
                records.push(r);
            }
            Err(e) => failures.push((s.id.clone(), e.to_string())),
        }
        if let Some(d) = left_right_difference(&pred.data, &gt, s.depth.width) {
            if let Some(ok) = ordering_correct(s.ambiguity, d) {
                ordering.push((s.id.clone(), d, ok));
            }
        }
    }
    let aggregate = if records.is_empty() {
        None
    } else {
        Some(aggregate(&records)?)
    };
    Ok(RunReport {
        mode: cfg.caption_mode.clone(),
        records,
        aggregate,
        failures,
        ordering,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

/// `f` over `items` on up to `workers` threads, results in input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

pub fn evaluate_run(
    samples: &[Sample],
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    cfg: &InferenceConfig,
    templates: &Templates,
    vocab: &Vocabulary,
) -> Result<RunReport> {
    evaluate_run_with(samples, model, schedule, cfg, templates, vocab, |_, _| Ok(()))
}

pub const ABLATION_HEADER: &str =
    "mode,prompt,caption_dropout,images,delta1_pct,absrel,ordering_accuracy_pct,failures";

/// One evaluation per caption mode: dataset, blank, then every template
/// prompt. All rows share images and initial noise.
pub fn ablate(
    samples: &[Sample],
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    base: &InferenceConfig,
    templates: &Templates,
    vocab: &Vocabulary,
) -> Result<Vec<RunReport>> {
    let mut modes = vec![CaptionMode::Dataset, CaptionMode::Blank];
    modes.extend(templates.prompts.iter().map(|p| CaptionMode::Template(p.name.clone())));
    modes
        .into_iter()
        .map(|mode| {
            let cfg = InferenceConfig {
                caption_mode: mode,
                ..base.clone()
            };
            evaluate_run(samples, model, schedule, &cfg, templates, vocab)
        })
        .collect()
}

/// Table of ablation rows. `caption_dropout` is the training setting of the
/// evaluated model.
pub fn ablation_csv(reports: &[RunReport], templates: &Templates, caption_dropout: Option<f64>) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    let num = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in reports {
        let prompt = match &r.mode {
            CaptionMode::Template(n) => templates.prompt(n).unwrap_or_default().to_string(),
            CaptionMode::Blank => String::new(),
            _ => String::from("<dataset caption>"),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.mode,
            csv_field(&prompt),
            num(caption_dropout),
            r.records.len(),
            num(r.aggregate.as_ref().map(|a| a.delta1_pct)),
            num(r.aggregate.as_ref().map(|a| a.absrel)),
            num(r.ordering_accuracy()),
            r.failures.len()
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const CURVE_HEADER: &str = "iteration,delta1,absrel";

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub delta1: f64,
    pub absrel: f64,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.iteration, p.delta1, p.absrel);
    }
    out
}

/// First iteration whose AbsRel is at or below `threshold`.
pub fn first_reaching(points: &[CurvePoint], threshold: f64) -> Option<usize> {
    points.iter().find(|p| p.absrel <= threshold).map(|p| p.iteration)
}

/// Trains while evaluating on `eval` every `eval_interval` iterations (and at
/// the end). Returns the curve and the training outcome.
#[allow(clippy::too_many_arguments)]
pub fn convergence_log(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[Sample],
    eval: &[Sample],
    eval_interval: usize,
    infer_cfg: &InferenceConfig,
    templates: &Templates,
    vocab: &Vocabulary,
    out_dir: &Path,
    mut progress: Option<&mut dyn FnMut(&TrainLogRecord)>,
) -> Result<(Vec<CurvePoint>, TrainOutcome)> {
    let schedule = model_cfg.schedule.build()?;
    infer_cfg.validate(templates)?;
    let mut points = Vec::new();
    let mut validate = |it: usize, model: &Denoiser<f32>| -> Result<(f64, f64)> {
        let r = evaluate_run(eval, model, &schedule, infer_cfg, templates, vocab)?;
        let a = r
            .aggregate
            .ok_or_else(|| Error::numeric("validation", "every evaluation image failed"))?;
        points.push(CurvePoint {
            iteration: it,
            delta1: a.delta1_pct,
            absrel: a.absrel,
        });
        Ok((a.delta1_pct, a.absrel))
    };
    let cfg = TrainConfig {
        validation_interval: eval_interval,
        ..train_cfg.clone()
    };
    let mut report = |r: &TrainLogRecord| {
        if let Some(p) = progress.as_mut() {
            p(r);
        }
    };
    let hooks = TrainHooks {
        resume: None,
        validate: Some(&mut validate),
        progress: Some(&mut report),
    };
    let outcome = trainer::train(model_cfg, &cfg, train_set, vocab, out_dir, hooks)?;
    Ok((points, outcome))
}

/// The shipped 256-entry colormap, dark to bright.
pub fn magma() -> Vec<[u8; 3]> {
    MAGMA
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<u8> = l.split(',').skip(1).map(|v| v.trim().parse().unwrap()).collect();
            [f[0], f[1], f[2]]
        })
        .collect()
}

/// Min-max scaling of the masked values to `0..=255` (unmasked pixels 0). A
/// constant map becomes uniform 128.
pub fn to_gray(depth: &Raster<f64>, mask: &[bool]) -> Result<Raster<u8>> {
    if depth.channels != 1 || mask.len() != depth.data.len() {
        return Err(Error::Shape("visualization needs a one-channel map and a matching mask".into()));
    }
    let vals = depth.data.iter().zip(mask).filter(|p| *p.1).map(|p| *p.0);
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return Err(Error::InvalidData("visualization mask is empty".into()));
    }
    let data = depth
        .data
        .iter()
        .zip(mask)
        .map(|(&v, &m)| match (m, hi > lo) {
            (false, _) => 0,
            (true, false) => 128,
            (true, true) => ((v - lo) / (hi - lo) * 255.0).round() as u8,
        })
        .collect();
    Raster::new(depth.height, depth.width, 1, data)
}

pub fn colorize(gray: &Raster<u8>) -> Raster<f32> {
    let lut = magma();
    let data = gray
        .data
        .iter()
        .flat_map(|&g| lut[g as usize].map(|c| c as f32 / 255.0))
        .collect();
    Raster::new(gray.height, gray.width, 3, data).expect("three channels per pixel")
}

/// Writes `path` as a PGM, plus a magma-colored PPM next to it when `color`.
pub fn visualize(depth: &Raster<f64>, mask: &[bool], path: &Path, color: bool) -> Result<()> {
    let gray = to_gray(depth, mask)?;
    std::fs::write(path, crate::raster::encode_pgm(&gray)).map_err(|e| Error::io(path, e))?;
    if color {
        crate::raster::write_ppm(&path.with_extension("ppm"), &colorize(&gray))?;
    }
    Ok(())
}

/// Splits off the last `eval_pairs` ambiguity pairs and `eval_scenes` plain
/// scenes as held-out sets: `(train, eval pairs, eval scenes)`.
pub fn holdout(samples: &[Sample], eval_pairs: usize, eval_scenes: usize) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let (pairs, scenes): (Vec<&Sample>, Vec<&Sample>) = samples.iter().partition(|s| s.ambiguity != AmbiguityTag::None);
    let pk = pairs.len().saturating_sub(2 * eval_pairs);
    let sk = scenes.len().saturating_sub(eval_scenes);
    let train = pairs[..pk].iter().chain(&scenes[..sk]).map(|s| (*s).clone()).collect();
    let ep = pairs[pk..].iter().map(|s| (*s).clone()).collect();
    let es = scenes[sk..].iter().map(|s| (*s).clone()).collect();
    (train, ep, es)
}

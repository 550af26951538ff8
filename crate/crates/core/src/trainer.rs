//! The optimization loop: noisy-latent regression with Adam, warmup plus
//! exponential learning-rate decay, gradient accumulation, flip augmentation,
//! caption dropout and checkpointing.
//!
//! Randomness per iteration `i` comes from two streams: `[TRAIN, i]` picks the
//! samples (with replacement) and their flip bits, `[TRAIN, i, NOISE]` is
//! consumed in order by the micro-batches for caption dropout, timesteps and
//! noise. A run is therefore a pure function of its configs, data and seed,
//! and resuming from iteration `k` replays exactly what a fresh run would do.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Provenance};
use crate::denoiser::{parameter_layout, Denoiser, DenoiserConfig, Parameterization, Params};
use crate::depthmetrics::normalize_depth;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::{self, tag, Stream};
use crate::scenegen::{horizontal_flip, Sample};
use crate::schedule::{self, NoiseSchedule, ScheduleConfig};
use crate::tensor::{Float, Tensor};
use crate::vocab::{TokenSequence, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PDCK1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOG_HEADER: &str = "iteration,loss,lr,seconds,val_delta1,val_absrel";
pub const LOG_FILE: &str = "train_log.csv";

/// Sub-label of the per-iteration noise stream.
const NOISE: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub micro_batch: usize,
    pub accumulation: usize,
    pub lr0: f64,
    pub warmup: usize,
    /// Iteration at which the decay reaches `lr_floor * lr0`.
    pub decay_horizon: usize,
    pub lr_floor: f64,
    pub flip_prob: f64,
    pub caption_dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_interval: usize,
    /// 0 disables validation callbacks.
    pub validation_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            micro_batch: 2,
            accumulation: 8,
            lr0: 3e-5,
            warmup: 100,
            decay_horizon: 25000,
            lr_floor: 0.01,
            flip_prob: 0.5,
            caption_dropout: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_interval: 50,
            validation_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full-scale recipe: 30000 iterations, effective batch 32.
    pub fn mirrored() -> Self {
        Self {
            iterations: 30000,
            accumulation: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        for (name, p) in [("flip_prob", self.flip_prob), ("caption_dropout", self.caption_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.accumulation == 0 || self.micro_batch == 0 {
            return bad("accumulation and micro_batch must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return bad("lr_floor must lie in (0, 1]");
        }
        if self.decay_horizon <= self.warmup {
            return bad("decay_horizon must exceed warmup");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be at least 1");
        }
        Ok(())
    }
}

/// Linear warmup to `lr0` over `warmup` steps, then exponential decay that
/// reaches `lr_floor * lr0` at `decay_horizon` and stays there.
pub fn lr_at(i: usize, cfg: &TrainConfig) -> f64 {
    if i < cfg.warmup {
        return cfg.lr0 * (i + 1) as f64 / cfg.warmup as f64;
    }
    // Dividing by (1/floor)^r rather than multiplying by floor^r keeps the
    // round values (3e-6, 3e-7) exact.
    let r = ((i.min(cfg.decay_horizon) - cfg.warmup) as f64) / (cfg.decay_horizon - cfg.warmup) as f64;
    cfg.lr0 / (1.0 / cfg.lr_floor).powf(r)
}

/// Adam first/second moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub m: Params<F>,
    pub v: Params<F>,
    pub step: u64,
}

impl<F: Float> OptimizerState<F> {
    pub fn new(params: &Params<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<F: Float>(
    params: &mut Params<F>,
    grads: &Params<F>,
    state: &mut OptimizerState<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(Error::Shape("parameters, gradients and moments differ in layout".into()));
    }
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::numeric(name, "non-finite gradient"));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let (b1, b2, eps) = (F::c(cfg.beta1), F::c(cfg.beta2), F::c(cfg.eps));
    let (one_b1, one_b2) = (F::c(1.0 - cfg.beta1), F::c(1.0 - cfg.beta2));
    let (step_size, inv_bc2) = (F::c(lr / bc1), F::c(1.0 / bc2));
    let tensors = params.tensors_mut().iter_mut();
    let moments = state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut().iter_mut());
    for ((p, (m, v)), g) in tensors.zip(moments).zip(grads.tensors()) {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + one_b1 * gk;
            v[k] = b2 * v[k] + one_b2 * gk * gk;
            p[k] -= step_size * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Normalized-depth latent of a sample, channel-major.
pub fn depth_latent(s: &Sample) -> Result<codec::LatentTensor<f64>> {
    let norm = normalize_depth(&s.depth_f64(), &s.mask_bool())?;
    let r = Raster::new(s.depth.height, s.depth.width, 1, norm.values)?;
    codec::encode(&r, Provenance::DepthLatent)
}

/// Network inputs and regression target for one micro-batch.
#[derive(Debug, Clone)]
pub struct Prepared<F> {
    pub z_t: Tensor<F>,
    pub x_latent: Tensor<F>,
    pub t: Vec<usize>,
    pub tokens: Vec<TokenSequence>,
    pub target: Tensor<F>,
}

/// Draws, per sample and in this order: the caption-dropout coin, `t` uniform
/// in `1..=T`, and the noise.
pub fn prepare_batch<F: Float>(
    batch: &[Sample],
    rng: &mut Stream,
    schedule: &NoiseSchedule,
    prediction: Parameterization,
    caption_dropout: f64,
    vocab: &Vocabulary,
) -> Result<Prepared<F>> {
    if batch.is_empty() {
        return Err(Error::InvalidData("empty training batch".into()));
    }
    let mut z_t = Vec::new();
    let mut x = Vec::new();
    let mut target = Vec::new();
    let mut ts = Vec::with_capacity(batch.len());
    let mut tokens = Vec::with_capacity(batch.len());
    let mut shape = None;
    for s in batch {
        let drop = rng.random::<f64>() < caption_dropout;
        tokens.push(if drop { TokenSequence::blank() } else { s.tokens(vocab) });
        let t = rng.random_range(1..=schedule.timesteps());
        ts.push(t);
        let z0 = depth_latent(s)?;
        let xl = codec::encode_image(&s.image)?;
        let dims = (z0.channels, xl.channels, z0.height, z0.width);
        if (xl.height, xl.width) != (z0.height, z0.width) || shape.is_some_and(|d| d != dims) {
            return Err(Error::Shape(format!("sample {} does not match the batch geometry", s.id)));
        }
        shape = Some(dims);
        let z0 = z0.to_planes();
        let eps = rng::standard_normal(rng, z0.len());
        let zt = schedule::marginal_sample(&z0, t, &eps, schedule)?;
        let tgt = match prediction {
            Parameterization::Epsilon => eps,
            Parameterization::V => schedule::v_target(&z0, &eps, t, schedule)?,
        };
        z_t.extend(zt.into_iter().map(F::c));
        target.extend(tgt.into_iter().map(F::c));
        x.extend(xl.to_planes().into_iter().map(F::c));
    }
    let (c, ci, h, w) = shape.unwrap();
    let n = batch.len();
    Ok(Prepared {
        z_t: Tensor::new(&[n, c, h, w], z_t)?,
        x_latent: Tensor::new(&[n, ci, h, w], x)?,
        t: ts,
        tokens,
        target: Tensor::new(&[n, c, h, w], target)?,
    })
}

/// Mean squared error of the model's prediction on a prepared batch.
pub fn prepared_loss<F: Float>(model: &Denoiser<F>, p: &Prepared<F>) -> Result<F> {
    let out = model.forward(&p.z_t, &p.x_latent, &p.t, &p.tokens)?;
    let n = F::c(out.len() as f64);
    let loss = out
        .data()
        .iter()
        .zip(p.target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<F>()
        / n;
    if !loss.is_finite() {
        return Err(Error::numeric("loss", "non-finite loss value"));
    }
    Ok(loss)
}

pub fn prepared_gradient<F: Float>(model: &Denoiser<F>, p: &Prepared<F>) -> Result<(F, Params<F>)> {
    model.gradient(|tape, m, pv| {
        let out = m.forward_on_tape(tape, pv, &p.z_t, &p.x_latent, &p.t, &p.tokens)?;
        Ok(tape.mse(out, &p.target))
    })
}

/// Training objective on one batch. Consumes `rng` exactly like a training
/// micro-batch does.
pub fn training_loss<F: Float>(
    model: &Denoiser<F>,
    batch: &[Sample],
    rng: &mut Stream,
    schedule: &NoiseSchedule,
    caption_dropout: f64,
    vocab: &Vocabulary,
) -> Result<F> {
    let p = prepare_batch(batch, rng, schedule, model.config.prediction, caption_dropout, vocab)?;
    prepared_loss(model, &p)
}

/// Sample indices and flip bits for iteration `i`.
pub fn iteration_draws(cfg: &TrainConfig, i: usize, dataset_len: usize) -> Vec<(usize, bool)> {
    let mut r = rng::stream(cfg.seed, &[tag::TRAIN, i as u64]);
    (0..cfg.micro_batch * cfg.accumulation)
        .map(|_| {
            let k = r.random_range(0..dataset_len);
            (k, r.random::<f64>() < cfg.flip_prob)
        })
        .collect()
}

/// Runs the accumulate-then-step update for one iteration and returns the
/// mean micro-batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_iteration<F: Float>(
    model: &mut Denoiser<F>,
    state: &mut OptimizerState<F>,
    samples: &[Sample],
    draws: &[(usize, bool)],
    noise: &mut Stream,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<F> {
    let mut total = model.params.zeros_like();
    let mut loss_sum = F::zero();
    let chunks = draws.chunks(cfg.micro_batch);
    let count = chunks.len();
    for chunk in chunks {
        let batch: Vec<Sample> = chunk
            .iter()
            .map(|&(k, flip)| if flip { horizontal_flip(&samples[k]) } else { samples[k].clone() })
            .collect();
        let p = prepare_batch(&batch, noise, schedule, model.config.prediction, cfg.caption_dropout, vocab)?;
        let (loss, g) = prepared_gradient(model, &p)?;
        loss_sum += loss;
        for (acc, g) in total.tensors_mut().iter_mut().zip(g.tensors()) {
            acc.add_assign(g);
        }
    }
    let inv = F::c(1.0 / count as f64);
    for g in total.tensors_mut() {
        g.scale(inv);
    }
    adam_step(&mut model.params, &total, state, lr, cfg)?;
    Ok(loss_sum * inv)
}

/// What a checkpoint's config section records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub iteration: u64,
    pub params: Params<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointConfig {
    model: ModelConfig,
    train: Option<TrainConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: CheckpointConfig,
    iteration: u64,
    optimizer_step: Option<u64>,
    tensors: BTreeMap<String, TensorEntry>,
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// `"PDCK1"`, little-endian `u64` header length, JSON header, then the `f32`
/// payloads. Offsets in the tensor directory are relative to the first payload
/// byte. Parameters come first, then Adam's first and second moments.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::new();
    let mut put = |name: String, t: &Tensor<f32>| {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(
            name,
            TensorEntry {
                shape: t.shape().to_vec(),
                offset,
                length: payload.len() as u64 - offset,
            },
        );
    };
    for (name, t) in ck.params.iter() {
        put(name.to_string(), t);
    }
    if let Some(opt) = &ck.optimizer {
        if !opt.m.same_layout(&ck.params) || !opt.v.same_layout(&ck.params) {
            return Err(Error::Shape("optimizer moments do not match parameters".into()));
        }
        for (name, t) in opt.m.iter() {
            put(format!("{M_PREFIX}{name}"), t);
        }
        for (name, t) in opt.v.iter() {
            put(format!("{V_PREFIX}{name}"), t);
        }
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: CheckpointConfig {
            model: ck.model.clone(),
            train: ck.train.clone(),
        },
        iteration: ck.iteration,
        optimizer_step: ck.optimizer.as_ref().map(|o| o.step),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidData(e.to_string()))?;
    let mut out = Vec::with_capacity(13 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err("not a PDCK1 checkpoint (bad magic or short file)".into());
    }
    let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let body = &bytes[13..];
    if hlen > body.len() as u64 {
        return Err(format!("header length {hlen} exceeds file size"));
    }
    let (json, payload) = body.split_at(hlen as usize);
    let header: Header = serde_json::from_slice(json).map_err(|e| format!("bad header: {e}"))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(format!(
            "format version {}, expected {CHECKPOINT_VERSION}",
            header.format_version
        ));
    }
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for (name, e) in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.length != 4 * n as u64 {
            return Err(format!("tensor {name}: length {} does not match its shape", e.length));
        }
        let end = e.offset.checked_add(e.length).ok_or("tensor offset overflow")?;
        if end > payload.len() as u64 {
            return Err(format!("tensor {name} extends past the end of the file"));
        }
        spans.push((e.offset, end, name));
    }
    spans.sort_unstable();
    if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1) {
        return Err(format!("tensors {} and {} overlap", w[0].2, w[1].2));
    }
    let load = |name: &str| -> std::result::Result<Tensor<f32>, String> {
        let e = header.tensors.get(name).ok_or(format!("missing tensor {name}"))?;
        let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::new(&e.shape, data).map_err(|e| e.to_string())
    };
    let layout = parameter_layout(&header.config.model.denoiser);
    let mut params = Params::default();
    let mut m = Params::default();
    let mut v = Params::default();
    for (name, shape) in &layout {
        let t = load(name)?;
        if t.shape() != shape.as_slice() {
            return Err(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()));
        }
        params.insert(name.clone(), t).map_err(|e| e.to_string())?;
        if header.optimizer_step.is_some() {
            m.insert(name.clone(), load(&format!("{M_PREFIX}{name}"))?)
                .map_err(|e| e.to_string())?;
            v.insert(name.clone(), load(&format!("{V_PREFIX}{name}"))?)
                .map_err(|e| e.to_string())?;
        }
    }
    let expected = layout.len() * if header.optimizer_step.is_some() { 3 } else { 1 };
    if header.tensors.len() != expected {
        return Err(format!(
            "{} tensors in directory, expected {expected}",
            header.tensors.len()
        ));
    }
    if !m.same_layout(&params) && header.optimizer_step.is_some() {
        return Err("optimizer moments do not match parameters".into());
    }
    Ok(Checkpoint {
        model: header.config.model,
        train: header.config.train,
        iteration: header.iteration,
        params,
        optimizer: header.optimizer_step.map(|step| OptimizerState { m, v, step }),
    })
}

/// Writes through a temporary file, so an interrupted save never replaces a
/// good checkpoint with a partial one.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|m| Error::data(path, m))
}

impl Checkpoint {
    pub fn denoiser(&self) -> Result<Denoiser<f32>> {
        Denoiser::from_params(self.model.denoiser.clone(), self.params.clone())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.model.schedule.build()
    }
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt-{iteration:06}.pdck")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
    /// Validation `(delta1 %, AbsRel)` when computed at this iteration.
    pub validation: Option<(f64, f64)>,
}

pub fn log_csv(records: &[TrainLogRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in records {
        let (d, a) = match r.validation {
            Some((d, a)) => (d.to_string(), a.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(out, "{},{},{},{:.3},{d},{a}", r.iteration, r.loss, r.lr, r.seconds);
    }
    out
}

pub fn parse_log(text: &str) -> Result<Vec<TrainLogRecord>> {
    let bad = |m: String| Error::InvalidData(format!("train log: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    let mut out: Vec<TrainLogRecord> = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields in {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
        let validation = if f[4].is_empty() {
            None
        } else {
            Some((num(f[4])?, num(f[5])?))
        };
        let iteration = f[0].parse().map_err(|_| bad(format!("bad iteration {:?}", f[0])))?;
        if out.last().is_some_and(|r| r.iteration >= iteration) {
            return Err(bad("iterations are not strictly increasing".into()));
        }
        out.push(TrainLogRecord {
            iteration,
            loss: num(f[1])?,
            lr: num(f[2])?,
            seconds: num(f[3])?,
            validation,
        });
    }
    Ok(out)
}

/// Hooks into the loop. `validate` runs every `validation_interval`
/// iterations and at the end; `progress` sees every log record.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub resume: Option<PathBuf>,
    #[allow(clippy::type_complexity)]
    pub validate: Option<&'a mut dyn FnMut(usize, &Denoiser<f32>) -> Result<(f64, f64)>>,
    pub progress: Option<&'a mut dyn FnMut(&TrainLogRecord)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Denoiser<f32>,
    pub optimizer: OptimizerState<f32>,
    pub log: Vec<TrainLogRecord>,
    pub final_checkpoint: PathBuf,
}

/// Trains from the seed-derived initialization (or `hooks.resume`), writing
/// checkpoints and the log into `out_dir`. On a numeric failure the error is
/// returned and the last interval checkpoint stays on disk.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[Sample],
    vocab: &Vocabulary,
    out_dir: &Path,
    mut hooks: TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.denoiser.validate()?;
    let schedule = model_cfg.schedule.build()?;
    if schedule.timesteps() != model_cfg.denoiser.timesteps {
        return Err(Error::Config(format!(
            "schedule has {} timesteps but the denoiser embeds {}",
            schedule.timesteps(),
            model_cfg.denoiser.timesteps
        )));
    }
    if samples.is_empty() {
        return Err(Error::InvalidData("training set is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);

    let (mut model, mut state, start, mut log) = match &hooks.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.model != *model_cfg {
                return Err(Error::Config(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            let state = ck
                .optimizer
                .clone()
                .ok_or_else(|| Error::data(path, "checkpoint has no optimizer state"))?;
            let mut log = match std::fs::read_to_string(&log_path) {
                Ok(text) => parse_log(&text)?,
                Err(_) => Vec::new(),
            };
            log.retain(|r| r.iteration as u64 <= ck.iteration);
            (ck.denoiser()?, state, ck.iteration as usize, log)
        }
        None => {
            let mut r = rng::stream(cfg.seed, &[tag::INIT]);
            let model = Denoiser::<f32>::init(model_cfg.denoiser.clone(), &mut r)?;
            let state = OptimizerState::new(&model.params);
            (model, state, 0, Vec::new())
        }
    };

    let save = |model: &Denoiser<f32>, state: &OptimizerState<f32>, it: usize, log: &[TrainLogRecord]| {
        let path = out_dir.join(checkpoint_name(it));
        let ck = Checkpoint {
            model: model_cfg.clone(),
            train: Some(cfg.clone()),
            iteration: it as u64,
            params: model.params.clone(),
            optimizer: Some(state.clone()),
        };
        save_checkpoint(&ck, &path)?;
        let mut f = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        f.write_all(log_csv(log).as_bytes())
            .map_err(|e| Error::io(&log_path, e))?;
        Ok::<_, Error>(path)
    };

    let clock = Instant::now();
    let mut final_checkpoint = out_dir.join(checkpoint_name(start));
    for i in start..cfg.iterations {
        let it = i + 1;
        let draws = iteration_draws(cfg, i, samples.len());
        let mut noise = rng::stream(cfg.seed, &[tag::TRAIN, i as u64, NOISE]);
        let lr = lr_at(i, cfg);
        let loss = train_iteration(
            &mut model, &mut state, samples, &draws, &mut noise, &schedule, vocab, cfg, lr,
        )?;
        let last = it == cfg.iterations;
        let validation = match hooks.validate.as_mut() {
            Some(f) if last || (cfg.validation_interval > 0 && it % cfg.validation_interval == 0) => {
                Some(f(it, &model)?)
            }
            _ => None,
        };
        let record = TrainLogRecord {
            iteration: it,
            loss: loss as f64,
            lr,
            seconds: clock.elapsed().as_secs_f64(),
            validation,
        };
        if let Some(p) = hooks.progress.as_mut() {
            p(&record);
        }
        log.push(record);
        if last || it % cfg.checkpoint_interval == 0 {
            final_checkpoint = save(&model, &state, it, &log)?;
        }
    }
    if start >= cfg.iterations {
        final_checkpoint = save(&model, &state, start, &log)?;
    }
    Ok(TrainOutcome {
        model,
        optimizer: state,
        log,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tests::tiny_config;
    use crate::scenegen::{generate_samples, DatasetConfig, GeneratorConfig};

    #[test]
    fn learning_rate_pins() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(99, &c), 3e-5);
        assert_eq!(lr_at(25000, &c), 3e-7);
        assert_eq!(lr_at(12550, &c), 3e-6);
        assert_eq!(lr_at(0, &c), 3e-7);
        assert_eq!(lr_at(100, &c), 3e-5);
        assert_eq!(lr_at(90000, &c), 3e-7);
        let mut prev = f64::INFINITY;
        for i in 100..26000 {
            let lr = lr_at(i, &c);
            assert!(lr <= prev);
            prev = lr;
        }
        // Closed form of the decay branch.
        let i = 5000;
        let want = 3e-5 * 0.01f64.powf((i - 100) as f64 / 24900.0);
        assert!((lr_at(i, &c) - want).abs() <= 1e-15 * want);
    }

    fn params1(v: f32) -> Params<f32> {
        let mut p = Params::default();
        p.insert("w", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let c = TrainConfig::default();
        for g in [3.0f32, -0.02, 1e-3] {
            let mut p = params1(0.5);
            let mut s = OptimizerState::new(&p);
            adam_step(&mut p, &params1(g), &mut s, 1e-3, &c).unwrap();
            let delta = (p.tensors()[0].data()[0] - 0.5) as f64;
            assert!(delta * g as f64 <= 0.0);
            assert!(delta.abs() <= 1e-3 * 1.0001 && delta.abs() >= 0.999e-3, "{delta}");
        }
        let mut p = params1(0.5);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &params1(1.0), &mut s, 1e-3, &c).unwrap();
        let (before, m1) = (p.clone(), s.m.tensors()[0].data()[0]);
        adam_step(&mut p, &params1(0.0), &mut s, 0.0, &c).unwrap();
        assert_eq!(p, before);
        assert!(s.m.tensors()[0].data()[0].abs() < m1.abs());
        assert_eq!(s.step, 2);
        let err = adam_step(&mut p, &params1(f32::NAN), &mut s, 1e-3, &c).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }) && err.to_string().contains('w'));
    }

    fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
        let cfg = DatasetConfig {
            pairs: n / 2,
            scenes: n - 2 * (n / 2),
            scene: GeneratorConfig {
                width: 8,
                height: 8,
                focal: 8.0,
                ..GeneratorConfig::default()
            },
            ..DatasetConfig::default()
        };
        generate_samples(&cfg, seed).unwrap()
    }

    fn tiny_model_config() -> ModelConfig {
        let mut d = tiny_config();
        d.latent_channels = 4;
        d.image_channels = 12;
        ModelConfig {
            schedule: ScheduleConfig {
                timesteps: d.timesteps,
                ..ScheduleConfig::default()
            },
            denoiser: d,
        }
    }

    #[test]
    fn zero_network_loss_is_noise_energy() {
        let mc = tiny_model_config();
        let mut d = mc.denoiser.clone();
        d.prediction = Parameterization::Epsilon;
        let params = Denoiser::<f64>::init(d.clone(), &mut rng::stream(1, &[])).unwrap().params;
        let zero = Denoiser::from_params(d, params.zeros_like()).unwrap();
        let sched = mc.schedule.build().unwrap();
        let samples = tiny_samples(64, 3);
        let vocab = Vocabulary::shipped();
        // 64 samples x 4 x 4 x 4 = 4096 noise values.
        let mut r = rng::stream(5, &[]);
        let loss = training_loss(&zero, &samples, &mut r, &sched, 0.0, &vocab).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "{loss}");
        let mut r2 = rng::stream(5, &[]);
        let again = training_loss(&zero, &samples, &mut r2, &sched, 0.0, &vocab).unwrap();
        assert_eq!(loss.to_bits(), again.to_bits());
    }

    #[test]
    fn full_dropout_blanks_every_caption() {
        let mc = tiny_model_config();
        let sched = mc.schedule.build().unwrap();
        let samples = tiny_samples(6, 1);
        let vocab = Vocabulary::shipped();
        let p: Prepared<f32> = prepare_batch(
            &samples,
            &mut rng::stream(0, &[]),
            &sched,
            Parameterization::V,
            1.0,
            &vocab,
        )
        .unwrap();
        assert!(p.tokens.iter().all(|t| *t == TokenSequence::blank()));
        let p: Prepared<f32> =
            prepare_batch(&samples, &mut rng::stream(0, &[]), &sched, Parameterization::V, 0.0, &vocab)
                .unwrap();
        assert!(p.tokens.iter().all(|t| !t.is_empty()));
    }

    #[test]
    fn loss_ignores_order_within_batch() {
        let mc = tiny_model_config();
        let model = Denoiser::<f64>::init(mc.denoiser.clone(), &mut rng::stream(2, &[])).unwrap();
        let sched = mc.schedule.build().unwrap();
        let samples = tiny_samples(4, 2);
        let vocab = Vocabulary::shipped();
        let mut p: Prepared<f64> =
            prepare_batch(&samples, &mut rng::stream(9, &[]), &sched, Parameterization::V, 0.0, &vocab)
                .unwrap();
        // Randomize the zero-initialized head so the prediction is non-trivial.
        let mut params = model.params.clone();
        let mut r = rng::stream(4, &[]);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.05 * rng::standard_normal(&mut r, 1)[0];
            }
        }
        let model = Denoiser::from_params(mc.denoiser.clone(), params).unwrap();
        let a = prepared_loss(&model, &p).unwrap();
        let n = p.t.len();
        let per = p.z_t.len() / n;
        let perm = [2usize, 0, 3, 1];
        let shuffle = |t: &Tensor<f64>, per: usize| {
            let data = perm.iter().flat_map(|&k| t.data()[k * per..(k + 1) * per].to_vec()).collect();
            Tensor::new(t.shape(), data).unwrap()
        };
        let xper = p.x_latent.len() / n;
        p = Prepared {
            z_t: shuffle(&p.z_t, per),
            x_latent: shuffle(&p.x_latent, xper),
            t: perm.iter().map(|&k| p.t[k]).collect(),
            tokens: perm.iter().map(|&k| p.tokens[k].clone()).collect(),
            target: shuffle(&p.target, per),
        };
        let b = prepared_loss(&model, &p).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} {b}");
    }

    #[test]
    fn accumulation_matches_one_large_batch() {
        let mc = tiny_model_config();
        let base = Denoiser::<f64>::init(mc.denoiser.clone(), &mut rng::stream(3, &[])).unwrap();
        let mut params = base.params.clone();
        let mut r = rng::stream(8, &[]);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.05 * rng::standard_normal(&mut r, 1)[0];
            }
        }
        let sched = mc.schedule.build().unwrap();
        let samples = tiny_samples(10, 4);
        let vocab = Vocabulary::shipped();
        let step = |micro: usize, acc: usize| {
            let cfg = TrainConfig {
                micro_batch: micro,
                accumulation: acc,
                ..TrainConfig::default()
            };
            let mut model = Denoiser::from_params(mc.denoiser.clone(), params.clone()).unwrap();
            let mut state = OptimizerState::new(&model.params);
            let draws = iteration_draws(&TrainConfig { micro_batch: 6, accumulation: 1, ..cfg.clone() }, 0, samples.len());
            let mut noise = rng::stream(1, &[NOISE]);
            train_iteration(&mut model, &mut state, &samples, &draws, &mut noise, &sched, &vocab, &cfg, 1e-3)
                .unwrap();
            model.params
        };
        let big = step(6, 1);
        let small = step(2, 3);
        for (a, b) in big.tensors().iter().zip(small.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-3), "{x} {y}");
            }
        }
    }

    fn random_checkpoint() -> Checkpoint {
        let mc = tiny_model_config();
        let model = Denoiser::<f32>::init(mc.denoiser.clone(), &mut rng::stream(6, &[])).unwrap();
        let mut opt = OptimizerState::new(&model.params);
        let mut r = rng::stream(7, &[]);
        for t in opt.m.tensors_mut().iter_mut().chain(opt.v.tensors_mut()) {
            for v in t.data_mut() {
                *v = rng::standard_normal(&mut r, 1)[0] as f32;
            }
        }
        opt.step = 17;
        Checkpoint {
            model: mc,
            train: Some(TrainConfig::default()),
            iteration: 17,
            params: model.params,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let ck = random_checkpoint();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());
        let json_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[13..13 + json_len]).unwrap();
        let bumped = json.replace("\"format_version\":1", "\"format_version\":2");
        assert_ne!(bumped, json);
        let mut v2 = bytes[..5].to_vec();
        v2.extend_from_slice(&(bumped.len() as u64).to_le_bytes());
        v2.extend_from_slice(bumped.as_bytes());
        v2.extend_from_slice(&bytes[13 + json_len..]);
        assert!(decode_checkpoint(&v2).unwrap_err().contains("version"));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pdck");
        save_checkpoint(&ck, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Data { .. })));
    }

    #[test]
    fn overlapping_directory_is_rejected() {
        let ck = random_checkpoint();
        let bytes = encode_checkpoint(&ck).unwrap();
        let json_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[13..13 + json_len]).unwrap();
        let dir = header["tensors"].as_object_mut().unwrap();
        let first = dir.keys().next().unwrap().clone();
        dir.get_mut(&first).unwrap()["offset"] = serde_json::json!(4);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..5].to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[13 + json_len..]);
        assert!(decode_checkpoint(&out).unwrap_err().contains("overlap"));
    }

    #[test]
    fn log_round_trip() {
        let records = vec![
            TrainLogRecord {
                iteration: 1,
                loss: 0.5,
                lr: 3e-7,
                seconds: 0.25,
                validation: None,
            },
            TrainLogRecord {
                iteration: 2,
                loss: 0.25,
                lr: 6e-7,
                seconds: 0.5,
                validation: Some((91.5, 0.0625)),
            },
        ];
        let text = log_csv(&records);
        assert!(text.starts_with("iteration,loss,lr,seconds,val_delta1,val_absrel\n1,0.5,"));
        assert!(text.lines().nth(1).unwrap().ends_with(",,"));
        assert_eq!(parse_log(&text).unwrap(), records);
        assert!(parse_log(&text.replace("\n2,", "\n1,")).is_err());
    }
}

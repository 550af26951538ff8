//! The text-conditioned U-Net noise predictor.
//!
//! Input is the channel concatenation `[z_t ‖ x_latent]`. The encoder runs a
//! stem convolution followed by one block per level (two conv → group-norm →
//! SiLU units, the first followed by an additive per-channel timestep bias),
//! each ending in 2x average pooling. The bottleneck carries a single masked
//! multi-head cross-attention from spatial features to caption tokens; token
//! features are word plus position embeddings passed through a layer norm and
//! SiLU, so that the same words in different slots give different features.
//! Every block is residual: its input is added back to the output, through a
//! 1x1 convolution when the channel count changes. The decoder mirrors the
//! encoder with nearest upsampling and skip concatenation, and a
//! zero-initialized convolution produces the prediction.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Float, Tensor};
use crate::vocab::{TokenSequence, MAX_TOKENS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Epsilon,
    V,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Channels of the depth latent (and of the prediction).
    pub latent_channels: usize,
    /// Channels of the image latent concatenated to the input.
    pub image_channels: usize,
    pub base_width: usize,
    pub level_widths: Vec<usize>,
    pub groups: usize,
    pub token_dim: usize,
    pub max_tokens: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Width of the sinusoidal timestep embedding.
    pub time_dim: usize,
    pub time_hidden: usize,
    /// Valid timesteps are `1..=timesteps`.
    pub timesteps: usize,
    pub prediction: Parameterization,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            image_channels: 12,
            base_width: 32,
            level_widths: vec![32, 64, 128],
            groups: 8,
            token_dim: 64,
            max_tokens: MAX_TOKENS,
            heads: 2,
            vocab_size: 64,
            time_dim: 64,
            time_hidden: 128,
            timesteps: 200,
            prediction: Parameterization::V,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.level_widths.is_empty() {
            return bad("level_widths must not be empty".into());
        }
        if self.groups == 0 {
            return bad("groups must be positive".into());
        }
        for &w in std::iter::once(&self.base_width).chain(&self.level_widths) {
            if w == 0 || w % self.groups != 0 {
                return bad(format!("width {w} is not divisible by {} groups", self.groups));
            }
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return bad(format!(
                "{} heads do not divide attention dim {}",
                self.heads, self.token_dim
            ));
        }
        if self.max_tokens == 0 || self.max_tokens > MAX_TOKENS {
            return bad(format!("max_tokens must be in 1..={MAX_TOKENS}"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 || self.time_hidden == 0 {
            return bad("time_dim must be even and positive".into());
        }
        if self.latent_channels == 0 || self.vocab_size < 2 || self.timesteps == 0 {
            return bad("latent_channels, vocab_size, timesteps must be positive".into());
        }
        Ok(())
    }

    /// Spatial downsampling factor between input and bottleneck.
    pub fn spatial_factor(&self) -> usize {
        1 << self.level_widths.len()
    }

    pub fn bottleneck_width(&self) -> usize {
        *self.level_widths.last().unwrap()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> Default for Params<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Float> Params<F> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidData(format!("duplicate tensor name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = Self::default();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape())).unwrap();
        }
        out
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        let mut out = Params::default();
        for (n, t) in self.iter() {
            out.insert(n, t.cast()).unwrap();
        }
        out
    }

    pub fn same_layout(&self, other: &Params<F>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Tape variables for each parameter, aligned with `Params` order.
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[*i]
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Sinusoidal timestep embedding: `[sin(t w_k), cos(t w_k)]`, `w_k = 10000^(-2k/dim)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let a = t as f64 * freq;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<F> {
    pub config: DenoiserConfig,
    pub params: Params<F>,
}

/// Shapes of every parameter tensor, in canonical order.
pub fn parameter_layout(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let th = cfg.time_hidden;
    let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, ci: usize, co: usize| {
        out.push((format!("{name}.weight"), vec![co, ci, 3, 3]));
        out.push((format!("{name}.bias"), vec![co]));
    };
    out.push(("time.fc1.weight".into(), vec![th, cfg.time_dim]));
    out.push(("time.fc1.bias".into(), vec![th]));
    out.push(("time.fc2.weight".into(), vec![th, th]));
    out.push(("time.fc2.bias".into(), vec![th]));
    out.push(("tokens.embedding".into(), vec![cfg.vocab_size, cfg.token_dim]));
    out.push(("tokens.position".into(), vec![cfg.max_tokens, cfg.token_dim]));
    out.push(("tokens.norm.scale".into(), vec![cfg.token_dim]));
    out.push(("tokens.norm.offset".into(), vec![cfg.token_dim]));
    conv(
        &mut out,
        "stem".into(),
        cfg.latent_channels + cfg.image_channels,
        cfg.base_width,
    );
    let block = |out: &mut Vec<(String, Vec<usize>)>, p: String, ci: usize, co: usize| {
        out.push((format!("{p}.time.weight"), vec![co, th]));
        out.push((format!("{p}.time.bias"), vec![co]));
        for (j, cin) in [(0, ci), (1, co)] {
            out.push((format!("{p}.conv{j}.weight"), vec![co, cin, 3, 3]));
            out.push((format!("{p}.conv{j}.bias"), vec![co]));
            out.push((format!("{p}.norm{j}.scale"), vec![co]));
            out.push((format!("{p}.norm{j}.offset"), vec![co]));
        }
        if ci != co {
            out.push((format!("{p}.skip.weight"), vec![co, ci, 1, 1]));
            out.push((format!("{p}.skip.bias"), vec![co]));
        }
    };
    let mut cin = cfg.base_width;
    for (k, &w) in cfg.level_widths.iter().enumerate() {
        block(&mut out, format!("down.{k}"), cin, w);
        cin = w;
    }
    let wb = cfg.bottleneck_width();
    block(&mut out, "mid".into(), wb, wb);
    let d = cfg.token_dim;
    out.push(("mid.attn.query".into(), vec![d, wb]));
    out.push(("mid.attn.key".into(), vec![d, d]));
    out.push(("mid.attn.value".into(), vec![d, d]));
    out.push(("mid.attn.out.weight".into(), vec![wb, d]));
    out.push(("mid.attn.out.bias".into(), vec![wb]));
    let mut below = wb;
    for (k, &w) in cfg.level_widths.iter().enumerate().rev() {
        block(&mut out, format!("up.{k}"), below + w, w);
        below = w;
    }
    conv(&mut out, "out".into(), below, cfg.latent_channels);
    out
}

const INIT_STD: f64 = 0.02;

impl<F: Float> Denoiser<F> {
    /// Random initialization: weights ~ N(0, 0.02²) truncated at ±2σ,
    /// norm scales 1, offsets and biases 0, output convolution exactly 0.
    pub fn init(config: DenoiserConfig, rng: &mut Stream) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut params = Params::default();
        for (name, shape) in parameter_layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<F> = if name.starts_with("out.") || name.ends_with(".offset") || name.ends_with("bias")
            {
                vec![F::zero(); n]
            } else if name.ends_with(".scale") {
                vec![F::one(); n]
            } else {
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break F::c(v);
                        }
                    })
                    .collect()
            };
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: Params<F>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len()
            || layout
                .iter()
                .zip(params.iter())
                .any(|((n, s), (pn, pt))| n != pn || s.as_slice() != pt.shape())
        {
            return Err(Error::InvalidData(
                "parameter tensors do not match the model configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn cast<G: Float>(&self) -> Denoiser<G> {
        Denoiser {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_inputs(
        &self,
        z_t: &Tensor<F>,
        x_latent: &Tensor<F>,
        t: &[usize],
        tokens: &[TokenSequence],
    ) -> Result<()> {
        let c = &self.config;
        let zs = z_t.shape();
        let xs = x_latent.shape();
        if zs.len() != 4 || zs[1] != c.latent_channels {
            return Err(Error::Shape(format!(
                "z_t must be [N, {}, H, W], got {zs:?}",
                c.latent_channels
            )));
        }
        if xs.len() != 4 || xs[0] != zs[0] || xs[1] != c.image_channels || xs[2..] != zs[2..] {
            return Err(Error::Shape(format!(
                "image latent {xs:?} is not aligned with z_t {zs:?}"
            )));
        }
        let f = c.spatial_factor();
        if zs[2] % f != 0 || zs[3] % f != 0 {
            return Err(Error::Shape(format!(
                "latent {}x{} is not divisible by {f}",
                zs[2], zs[3]
            )));
        }
        if t.len() != zs[0] || tokens.len() != zs[0] {
            return Err(Error::Shape(format!(
                "batch of {} latents needs as many timesteps and token sequences",
                zs[0]
            )));
        }
        if let Some(bad) = t.iter().find(|&&s| s == 0 || s > c.timesteps) {
            return Err(Error::Shape(format!(
                "timestep {bad} outside 1..={}",
                c.timesteps
            )));
        }
        Ok(())
    }

    /// Places every parameter on `tape`; `trainable` selects leaf kind.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars {
            vars,
            index: self.params.index.clone(),
        }
    }

    /// Builds the forward graph and returns the prediction variable.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<F>,
        pv: &ParamVars,
        z_t: &Tensor<F>,
        x_latent: &Tensor<F>,
        t: &[usize],
        tokens: &[TokenSequence],
    ) -> Result<Var> {
        self.check_inputs(z_t, x_latent, t, tokens)?;
        let cfg = &self.config;
        let n = z_t.shape()[0];

        // Timestep MLP.
        let mut temb = Vec::with_capacity(n * cfg.time_dim);
        for &s in t {
            temb.extend(timestep_embedding(s, cfg.time_dim).into_iter().map(F::c));
        }
        let temb = tape.constant(Tensor::new(&[n, cfg.time_dim], temb)?);
        let h = tape.linear(temb, pv.get("time.fc1.weight"), Some(pv.get("time.fc1.bias")));
        let h = tape.silu(h);
        let h = tape.linear(h, pv.get("time.fc2.weight"), Some(pv.get("time.fc2.bias")));
        let temb = tape.silu(h);

        // Caption tokens.
        let l = cfg.max_tokens;
        let mut ids = Vec::with_capacity(n * l);
        let mut mask = Vec::with_capacity(n * l);
        for seq in tokens {
            for &id in &seq.ids[..l] {
                if id >= cfg.vocab_size {
                    return Err(Error::Shape(format!(
                        "token id {id} outside vocabulary of {}",
                        cfg.vocab_size
                    )));
                }
                ids.push(id);
                mask.push(id != crate::vocab::PAD);
            }
        }
        let tok = tape.embedding(pv.get("tokens.embedding"), &ids, n, l);
        let tok = tape.add_broadcast(tok, pv.get("tokens.position"));
        let tok = tape.layer_norm(tok, pv.get("tokens.norm.scale"), pv.get("tokens.norm.offset"));
        let tok = tape.silu(tok);

        let unit = |tape: &mut Tape<F>, x: Var, p: &str, j: usize, groups: usize| {
            let h = tape.conv2d(
                x,
                pv.get(&format!("{p}.conv{j}.weight")),
                Some(pv.get(&format!("{p}.conv{j}.bias"))),
            );
            let h = tape.group_norm(
                h,
                pv.get(&format!("{p}.norm{j}.scale")),
                pv.get(&format!("{p}.norm{j}.offset")),
                groups,
            );
            tape.silu(h)
        };
        let block = |tape: &mut Tape<F>, x: Var, p: &str, mid: Option<&dyn Fn(&mut Tape<F>, Var) -> Var>| {
            let tb = tape.linear(
                temb,
                pv.get(&format!("{p}.time.weight")),
                Some(pv.get(&format!("{p}.time.bias"))),
            );
            let h = unit(tape, x, p, 0, cfg.groups);
            let mut h = tape.add_channel_bias(h, tb);
            if let Some(f) = mid {
                h = f(tape, h);
            }
            let h = unit(tape, h, p, 1, cfg.groups);
            let skip = match pv.try_get(&format!("{p}.skip.weight")) {
                Some(w) => tape.conv2d(x, w, Some(pv.get(&format!("{p}.skip.bias")))),
                None => x,
            };
            tape.add(h, skip)
        };

        let zin = tape.constant(z_t.clone());
        let xin = tape.constant(x_latent.clone());
        let input = tape.concat(zin, xin);
        let mut h = tape.conv2d(input, pv.get("stem.weight"), Some(pv.get("stem.bias")));
        let mut skips = Vec::with_capacity(cfg.level_widths.len());
        for k in 0..cfg.level_widths.len() {
            h = block(tape, h, &format!("down.{k}"), None);
            skips.push(h);
            h = tape.avg_pool2(h);
        }

        let attend = |tape: &mut Tape<F>, x: Var| -> Var {
            let (hh, ww) = {
                let s = tape.value(x).shape();
                (s[2], s[3])
            };
            let seq = tape.to_tokens(x);
            let q = tape.linear(seq, pv.get("mid.attn.query"), None);
            let k = tape.linear(tok, pv.get("mid.attn.key"), None);
            let v = tape.linear(tok, pv.get("mid.attn.value"), None);
            let a = tape.attention(q, k, v, &mask, cfg.heads);
            let o = tape.linear(a, pv.get("mid.attn.out.weight"), Some(pv.get("mid.attn.out.bias")));
            let o = tape.from_tokens(o, hh, ww);
            tape.add(x, o)
        };
        h = block(tape, h, "mid", Some(&attend));

        for k in (0..cfg.level_widths.len()).rev() {
            let up = tape.upsample2(h);
            let cat = tape.concat(up, skips[k]);
            h = block(tape, cat, &format!("up.{k}"), None);
        }
        Ok(tape.conv2d(h, pv.get("out.weight"), Some(pv.get("out.bias"))))
    }

    /// Network prediction for a batch `[N, C', H', W']`.
    pub fn forward(
        &self,
        z_t: &Tensor<F>,
        x_latent: &Tensor<F>,
        t: &[usize],
        tokens: &[TokenSequence],
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &pv, z_t, x_latent, t, tokens)?;
        let value = tape.value(out).clone();
        if !value.all_finite() {
            return Err(Error::numeric("denoiser forward", "non-finite prediction"));
        }
        Ok(value)
    }

    /// Value and exact reverse-mode gradient of a scalar loss built by `loss`.
    ///
    /// The returned gradients share the parameters' names and shapes; a
    /// parameter the loss does not depend on gets an all-zero gradient.
    pub fn gradient<L>(&self, loss: L) -> Result<(F, Params<F>)>
    where
        L: FnOnce(&mut Tape<F>, &Self, &ParamVars) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, true);
        let root = loss(&mut tape, self, &pv)?;
        let value = tape.value(root).data()[0];
        if !value.is_finite() {
            return Err(Error::numeric("loss", "non-finite loss value"));
        }
        let mut grads = tape.backward(root);
        let mut out = Params::default();
        for ((name, t), &v) in self.params.iter().zip(pv.vars()) {
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()));
            if !g.all_finite() {
                return Err(Error::numeric(name, "non-finite gradient"));
            }
            out.insert(name, g)?;
        }
        Ok((value, out))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng;
    use crate::vocab::Vocabulary;

    pub(crate) fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 2,
            image_channels: 3,
            base_width: 4,
            level_widths: vec![4, 8],
            groups: 2,
            token_dim: 8,
            max_tokens: 4,
            heads: 2,
            vocab_size: 64,
            time_dim: 8,
            time_hidden: 8,
            timesteps: 10,
            prediction: Parameterization::Epsilon,
        }
    }

    fn inputs(cfg: &DenoiserConfig, n: usize, hw: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut r = rng::stream(seed, &[9]);
        let z = rng::standard_normal(&mut r, n * cfg.latent_channels * hw * hw);
        let x = rng::standard_normal(&mut r, n * cfg.image_channels * hw * hw);
        (
            Tensor::new(&[n, cfg.latent_channels, hw, hw], z).unwrap(),
            Tensor::new(&[n, cfg.image_channels, hw, hw], x).unwrap(),
        )
    }

    #[test]
    fn fresh_init_predicts_zero() {
        let cfg = tiny_config();
        let net = Denoiser::<f64>::init(cfg.clone(), &mut rng::stream(1, &[])).unwrap();
        let (z, x) = inputs(&cfg, 2, 8, 3);
        let toks = vec![Vocabulary::shipped().tokenize("the left cube"); 2];
        let out = net.forward(&z, &x, &[1, 7], &toks).unwrap();
        assert_eq!(out.shape(), z.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let a = Denoiser::<f32>::init(DenoiserConfig::default(), &mut rng::stream(5, &[])).unwrap();
        let b = Denoiser::<f32>::init(DenoiserConfig::default(), &mut rng::stream(5, &[])).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.params.iter() {
            if name.starts_with("out.") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".weight") && !name.starts_with("out.") {
                assert!(t.data().iter().all(|&v| v.abs() <= 0.04), "{name}");
            }
        }
    }

    #[test]
    fn default_parameter_count_is_pinned() {
        let layout = parameter_layout(&DenoiserConfig::default());
        let count: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(count, DEFAULT_PARAMETER_COUNT);
        let names: std::collections::HashSet<_> = layout.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), layout.len());
    }

    // Architecture arithmetic for the default configuration.
    const DEFAULT_PARAMETER_COUNT: usize = {
        let th = 128;
        let time = 64 * th + th + th * th + th;
        let tokens = 64 * 64 + 16 * 64 + 2 * 64;
        let stem = 32 * 16 * 9 + 32;
        const fn block(ci: usize, co: usize) -> usize {
            let skip = if ci == co { 0 } else { co * ci + co };
            co * 128 + co + (co * ci * 9 + co + 2 * co) + (co * co * 9 + co + 2 * co) + skip
        }
        let down = block(32, 32) + block(32, 64) + block(64, 128);
        let mid = block(128, 128) + 64 * 128 + 64 * 64 * 2 + 128 * 64 + 128;
        let up = block(128 + 128, 128) + block(128 + 64, 64) + block(64 + 32, 32);
        let out = 4 * 32 * 9 + 4;
        time + tokens + stem + down + mid + up + out
    };

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny_config();
        let net = Denoiser::<f64>::init(cfg.clone(), &mut rng::stream(1, &[])).unwrap();
        let (z, x) = inputs(&cfg, 1, 8, 3);
        let toks = vec![TokenSequence::blank()];
        assert!(matches!(net.forward(&z, &x, &[0], &toks), Err(Error::Shape(_))));
        assert!(matches!(net.forward(&z, &x, &[11], &toks), Err(Error::Shape(_))));
        let (z6, _) = inputs(&cfg, 1, 6, 3);
        assert!(matches!(net.forward(&z6, &x, &[1], &toks), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = DenoiserConfig::default();
        c.level_widths = vec![30];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = DenoiserConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn timestep_embeddings_differ() {
        let a = timestep_embedding(1, 64);
        let b = timestep_embedding(2, 64);
        assert_ne!(a, b);
        assert_eq!(a[0], 1f64.sin());
        assert_eq!(a[32], 1f64.cos());
    }
}

//! Self-contained correctness checks with independently computed
//! expectations. `selftest` and the acceptance suite both run these.

use std::fmt;
use std::time::Instant;

use rand::Rng;

use crate::denoiser::{Denoiser, DenoiserConfig, Parameterization};
use crate::depthmetrics::{self, AlignMethod};
use crate::error::Error;
use crate::rng::{self, standard_normal, Stream};
use crate::schedule::{self, make_schedule, NoiseSchedule, ScheduleKind};
use crate::tensor::Tensor;
use crate::trainer::{lr_at, prepared_gradient, prepared_loss, Prepared, TrainConfig};
use crate::vocab::{TokenSequence, MAX_TOKENS};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} ({:.2}s): {}", self.name, self.seconds, self.detail)
    }
}

fn timed(name: &'static str, run: impl FnOnce() -> Result<String, String>) -> Check {
    let clock = Instant::now();
    let (passed, detail) = match run() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check {
        name,
        passed,
        detail,
        seconds: clock.elapsed().as_secs_f64(),
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Every suite, in acceptance order.
pub fn all() -> Vec<Check> {
    vec![
        schedule_identities(),
        gradient_check(),
        metric_oracles(),
        normalization(),
        affine_invariance(),
        lr_pins(),
    ]
}

pub const SCHEDULE_TOL: f64 = 1e-10;

/// `alpha_bar` recomputed from the beta formula, eps/v/x0 round trips, and a
/// DDIM walk with the true noise tracking the closed-form marginal, for
/// `T` in {2, 200, 1000}.
pub fn schedule_identities() -> Check {
    timed("schedule identities", || {
        let cases = [
            (2, ScheduleKind::Linear, 0.1, 0.2),
            (200, ScheduleKind::ScaledLinear, 8.5e-4 * 5.0, 0.15),
            (1000, ScheduleKind::ScaledLinear, 8.5e-4, 1.2e-2),
            (1000, ScheduleKind::Linear, 1e-4, 2e-2),
        ];
        let mut worst = 0.0f64;
        for (i, &(tt, kind, b0, b1)) in cases.iter().enumerate() {
            let s = make_schedule(tt, kind, b0, b1).map_err(|e| e.to_string())?;
            worst = worst.max(check_schedule(&s, tt, kind, b0, b1, i as u64)?);
        }
        let two = make_schedule(2, ScheduleKind::Linear, 0.1, 0.2).map_err(|e| e.to_string())?;
        ensure(
            (two.alpha_bar(1) - 0.9).abs() <= 1e-15 && (two.alpha_bar(2) - 0.72).abs() <= 1e-15,
            || format!("T=2 alpha_bar = {}, {}", two.alpha_bar(1), two.alpha_bar(2)),
        )?;
        Ok(format!("T in {{2, 200, 1000}}, worst relative error {worst:.2e}"))
    })
}

fn check_schedule(s: &NoiseSchedule, tt: usize, kind: ScheduleKind, b0: f64, b1: f64, seed: u64) -> Result<f64, String> {
    let e = |e: Error| e.to_string();
    let mut worst = 0.0f64;
    let mut prod = 1.0;
    for t in 1..=tt {
        let f = (t - 1) as f64 / (tt - 1) as f64;
        let beta = match kind {
            ScheduleKind::Linear => b0 + f * (b1 - b0),
            ScheduleKind::ScaledLinear => (b0.sqrt() + f * (b1.sqrt() - b0.sqrt())).powi(2),
        };
        prod *= 1.0 - beta;
        let r = (s.alpha_bar(t) - prod).abs() / prod;
        ensure(r <= SCHEDULE_TOL, || format!("T={tt}: alpha_bar({t}) off by {r:.2e}"))?;
        worst = worst.max(r);
    }
    let mut r = rng::stream(seed, &[0x5c4e]);
    let n = 64;
    let z0 = standard_normal(&mut r, n);
    let eps = standard_normal(&mut r, n);
    let ts: Vec<usize> = [1, 2, tt / 2, tt - 1, tt].into_iter().filter(|&t| t >= 1).collect();
    for &t in &ts {
        let zt = schedule::marginal_sample(&z0, t, &eps, s).map_err(e)?;
        let v = schedule::v_target(&z0, &eps, t, s).map_err(e)?;
        let pairs = [
            ("eps_from_v", schedule::eps_from_v(&v, &zt, t, s).map_err(e)?, &eps),
            ("x0_from_v", schedule::x0_from_v(&v, &zt, t, s).map_err(e)?, &z0),
            ("x0_from_eps", schedule::x0_from_eps(&eps, &zt, t, s).map_err(e)?, &z0),
        ];
        for (what, got, want) in pairs {
            let err = rel_err(&got, want);
            ensure(err <= SCHEDULE_TOL, || format!("T={tt} t={t}: {what} off by {err:.2e}"))?;
            worst = worst.max(err);
        }
    }
    for steps in [1, tt.min(10), tt] {
        let seq = schedule::make_ddim_subsequence(tt, steps).map_err(e)?;
        let mut z = schedule::marginal_sample(&z0, seq[0], &eps, s).map_err(e)?;
        for (t, t_prev) in schedule::ddim_pairs(&seq) {
            z = schedule::ddim_step(&z, &eps, t, t_prev, s).map_err(e)?;
            let want = if t_prev == 0 {
                z0.clone()
            } else {
                schedule::marginal_sample(&z0, t_prev, &eps, s).map_err(e)?
            };
            let err = rel_err(&z, &want);
            ensure(err <= SCHEDULE_TOL, || {
                format!("T={tt} S={steps}: DDIM at t={t_prev} off the marginal by {err:.2e}")
            })?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub const GRADIENT_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Widths [4, 8], 8x8 latents, 4 tokens, heads 2.
pub fn gradient_config() -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 2,
        image_channels: 3,
        base_width: 4,
        level_widths: vec![4, 8],
        groups: 2,
        token_dim: 8,
        max_tokens: 4,
        heads: 2,
        vocab_size: 16,
        time_dim: 8,
        time_hidden: 8,
        timesteps: 10,
        prediction: Parameterization::V,
    }
}

/// Analytic gradient of the MSE objective against central differences for
/// every element of every parameter tensor. The second sample's caption is
/// all padding. Error per tensor is `max |analytic - numeric| / max |numeric|`.
pub fn gradient_check() -> Check {
    timed("gradient check", || {
        let cfg = gradient_config();
        let mut r = rng::stream(7, &[0x6752]);
        let mut model = Denoiser::<f64>::init(cfg.clone(), &mut r).map_err(|e| e.to_string())?;
        // Fresh init zeroes the output layer; move off it so every tensor
        // receives gradient.
        for t in model.params.tensors_mut() {
            let noise = standard_normal(&mut r, t.len());
            for (v, n) in t.data_mut().iter_mut().zip(noise) {
                *v += 0.3 * n;
            }
        }
        let p = gradient_batch(&cfg, &mut r);
        let (_, grads) = prepared_gradient(&model, &p).map_err(|e| e.to_string())?;
        let mut worst = (0.0f64, String::new());
        let mut elements = 0;
        for k in 0..model.params.len() {
            let name = model.params.names()[k].clone();
            let n = model.params.tensors()[k].len();
            let mut numeric = vec![0.0; n];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let orig = model.params.tensors()[k].data()[j];
                let mut at = |v: f64| {
                    model.params.tensors_mut()[k].data_mut()[j] = v;
                    prepared_loss(&model, &p)
                };
                let up = at(orig + FD_STEP).map_err(|e| e.to_string())?;
                let down = at(orig - FD_STEP).map_err(|e| e.to_string())?;
                model.params.tensors_mut()[k].data_mut()[j] = orig;
                *slot = (up - down) / (2.0 * FD_STEP);
            }
            elements += n;
            let analytic = grads.tensors()[k].data();
            let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            ensure(scale > 0.0, || format!("{name} receives no gradient"))?;
            let err = rel_err(analytic, &numeric);
            ensure(err < GRADIENT_TOL, || format!("{name}: relative error {err:.2e}"))?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
        Ok(format!(
            "{} tensors, {elements} elements, worst {:.2e} ({})",
            model.params.len(),
            worst.0,
            worst.1
        ))
    })
}

fn gradient_batch(cfg: &DenoiserConfig, r: &mut Stream) -> Prepared<f64> {
    let (n, hw) = (2, 8);
    let lat = n * cfg.latent_channels * hw * hw;
    let mut caption = TokenSequence::blank();
    caption.ids[..4].copy_from_slice(&[5, 9, 3, 12]);
    debug_assert!(cfg.max_tokens <= MAX_TOKENS);
    Prepared {
        z_t: Tensor::new(&[n, cfg.latent_channels, hw, hw], standard_normal(r, lat)).unwrap(),
        x_latent: Tensor::new(
            &[n, cfg.image_channels, hw, hw],
            standard_normal(r, n * cfg.image_channels * hw * hw),
        )
        .unwrap(),
        t: vec![3, 9],
        tokens: vec![caption, TokenSequence::blank()],
        target: Tensor::new(&[n, cfg.latent_channels, hw, hw], standard_normal(r, lat)).unwrap(),
    }
}

fn direct_delta1(p: &[f64], g: &[f64], m: &[bool]) -> f64 {
    let mut valid = 0usize;
    let mut hits = 0usize;
    for i in 0..p.len() {
        if !m[i] {
            continue;
        }
        valid += 1;
        if p[i] > 0.0 && g[i] > 0.0 {
            let ratio = if p[i] > g[i] { p[i] / g[i] } else { g[i] / p[i] };
            if ratio < 1.25 {
                hits += 1;
            }
        }
    }
    100.0 * hits as f64 / valid as f64
}

fn direct_absrel(p: &[f64], g: &[f64], m: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut valid = 0usize;
    for i in 0..p.len() {
        if m[i] {
            sum += (g[i] - p[i]).abs() / g[i];
            valid += 1;
        }
    }
    sum / valid as f64
}

/// Exact L1 line fit: an optimum of a two-parameter least-absolute-deviation
/// problem passes through two data points, so every pair is tried.
pub fn l1_vertex_minimum(y: &[f64], t: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            if y[i] == y[j] {
                continue;
            }
            let a = (t[i] - t[j]) / (y[i] - y[j]);
            let b = t[i] - a * y[i];
            let obj = y.iter().zip(t).map(|(&y, &t)| (a * y + b - t).abs()).sum::<f64>() / y.len() as f64;
            best = best.min(obj);
        }
    }
    best
}

pub const L1_SLACK: f64 = 1e-6;
pub const ORTHOGONALITY_TOL: f64 = 1e-9;

/// delta1/AbsRel against direct loops on 1000 random maps, the 1.25 boundary,
/// L2 normal equations, and IRLS against the exact L1 optimum on 50 instances.
pub fn metric_oracles() -> Check {
    timed("metric oracles", || {
        let mut r = rng::stream(11, &[0x6d74]);
        for k in 0..1000 {
            let n = r.random_range(1..=256);
            let g: Vec<f64> = (0..n).map(|_| r.random_range(0.1..10.0)).collect();
            let p: Vec<f64> = g
                .iter()
                .map(|&g| if r.random::<f64>() < 0.05 { -g } else { g * r.random_range(0.5..1.8) })
                .collect();
            let mut m: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.8).collect();
            m[0] = true;
            let d = depthmetrics::delta1(&p, &g, &m).map_err(|e| e.to_string())?;
            let a = depthmetrics::absrel(&p, &g, &m).map_err(|e| e.to_string())?;
            ensure(d == direct_delta1(&p, &g, &m), || format!("map {k}: delta1 {d}"))?;
            ensure(a == direct_absrel(&p, &g, &m), || format!("map {k}: absrel {a}"))?;
        }
        let all = [true];
        for (p, g) in [(1.25, 1.0), (1.0, 1.25), (2.5, 2.0)] {
            let d = depthmetrics::delta1(&[p], &[g], &all).map_err(|e| e.to_string())?;
            ensure(d == 0.0, || format!("ratio exactly 1.25 ({p}/{g}) counted as a hit"))?;
        }
        let d = depthmetrics::delta1(&[1.2499999], &[1.0], &all).map_err(|e| e.to_string())?;
        ensure(d == 100.0, || "ratio just below 1.25 counted as a miss".into())?;

        let mut worst_orth = 0.0f64;
        let mut worst_gap = f64::NEG_INFINITY;
        for k in 0..50 {
            let n = r.random_range(8..=40);
            let y: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let (a0, b0) = (r.random_range(0.5..5.0), r.random_range(-2.0..2.0));
            let t: Vec<f64> = y
                .iter()
                .map(|&y| {
                    let outlier = if r.random::<f64>() < 0.15 { r.random_range(-3.0..3.0) } else { 0.0 };
                    a0 * y + b0 + 0.05 * standard_normal(&mut r, 1)[0] + outlier
                })
                .collect();
            let mask = vec![true; n];
            let l2 = depthmetrics::align_affine(&y, &t, &mask, AlignMethod::L2).map_err(|e| e.to_string())?;
            let res: Vec<f64> = y.iter().zip(&t).map(|(&y, &t)| l2.scale * y + l2.shift - t).collect();
            let orth = (res.iter().sum::<f64>() / n as f64)
                .abs()
                .max((res.iter().zip(&y).map(|(r, y)| r * y).sum::<f64>() / n as f64).abs());
            ensure(orth <= ORTHOGONALITY_TOL, || format!("instance {k}: L2 residual not orthogonal ({orth:.2e})"))?;
            worst_orth = worst_orth.max(orth);
            let l1 = depthmetrics::align_affine(&y, &t, &mask, AlignMethod::L1).map_err(|e| e.to_string())?;
            let best = l1_vertex_minimum(&y, &t);
            let gap = l1.objective - best;
            ensure(gap <= L1_SLACK, || format!("instance {k}: IRLS objective {} vs optimum {best}", l1.objective))?;
            worst_gap = worst_gap.max(gap);
        }
        Ok(format!(
            "1000 maps exact, boundary pinned, L2 orthogonality {worst_orth:.1e}, IRLS gap {worst_gap:.1e}"
        ))
    })
}

pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Percentiles recomputed by hand; the fitted map sends y2 to -1 and y98 to
/// +1; denormalize inverts unclamped pixels; constant maps are degenerate.
pub fn normalization() -> Check {
    timed("normalization", || {
        let mut r = rng::stream(13, &[0x6e6f]);
        let mut worst = 0.0f64;
        for k in 0..20 {
            let n = r.random_range(10..=500);
            let y: Vec<f64> = (0..n).map(|_| r.random_range(0.5..9.0)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.9).collect();
            mask[..2].fill(true);
            let mut v: Vec<f64> = y.iter().zip(&mask).filter(|(_, &m)| m).map(|(&y, _)| y).collect();
            v.sort_by(f64::total_cmp);
            let pct = |q: f64| {
                let pos = q * (v.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(v.len() - 1);
                v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
            };
            let (y2, y98) = (pct(0.02), pct(0.98));
            let out = depthmetrics::normalize_depth(&y, &mask).map_err(|e| e.to_string())?;
            ensure(
                (out.y2 - y2).abs() <= NORMALIZATION_TOL * y2.abs() && (out.y98 - y98).abs() <= NORMALIZATION_TOL * y98.abs(),
                || format!("case {k}: percentiles {} {} vs {y2} {y98}", out.y2, out.y98),
            )?;
            let free: Vec<usize> = (0..n).filter(|&i| out.values[i].abs() < depthmetrics::CLAMP).collect();
            let (&i, &j) = (free.first().unwrap(), free.iter().find(|&&j| y[j] != y[free[0]]).unwrap());
            let slope = (out.values[i] - out.values[j]) / (y[i] - y[j]);
            let at = |q: f64| out.values[i] + slope * (q - y[i]);
            let e = (at(y2) + 1.0).abs().max((at(y98) - 1.0).abs());
            ensure(e <= NORMALIZATION_TOL, || format!("case {k}: y2/y98 map to {} / {}", at(y2), at(y98)))?;
            let back = depthmetrics::denormalize(&out.values, out.y2, out.y98).map_err(|e| e.to_string())?;
            for &f in &free {
                let err = (back[f] - y[f]).abs() / y[f];
                ensure(err <= NORMALIZATION_TOL, || format!("case {k}: denormalize off by {err:.2e}"))?;
                worst = worst.max(err);
            }
            worst = worst.max(e);
        }
        let constant = depthmetrics::normalize_depth(&[3.0; 50], &[true; 50]);
        ensure(matches!(constant, Err(Error::Degenerate(_))), || format!("constant map gave {constant:?}"))?;
        Ok(format!("20 maps, worst error {worst:.1e}; constant map rejected"))
    })
}

pub const AFFINE_TOL: f64 = 1e-9;

/// evaluate_pair(a y + b, y*) == evaluate_pair(y, y*) for random a in
/// [0.1, 10], b in [-5, 5], under both alignments.
pub fn affine_invariance() -> Check {
    timed("affine invariance", || {
        let mut r = rng::stream(17, &[0x6166]);
        let mut worst = 0.0f64;
        for k in 0..200 {
            let n = r.random_range(16..=400);
            let gt: Vec<f64> = (0..n).map(|_| r.random_range(1.0..9.0)).collect();
            let (s, o) = (r.random_range(0.05..0.5), r.random_range(-2.0..2.0));
            let pred: Vec<f64> = gt.iter().map(|&g| s * g + o + 0.2 * standard_normal(&mut r, 1)[0]).collect();
            let mask: Vec<bool> = (0..n).map(|i| i < 2 || r.random::<f64>() < 0.9).collect();
            let (a, b) = (r.random_range(0.1..10.0), r.random_range(-5.0..5.0));
            let moved: Vec<f64> = pred.iter().map(|&p| a * p + b).collect();
            for method in [AlignMethod::L1, AlignMethod::L2] {
                let x = depthmetrics::evaluate_pair(&pred, &gt, &mask, method).map_err(|e| e.to_string())?;
                let y = depthmetrics::evaluate_pair(&moved, &gt, &mask, method).map_err(|e| e.to_string())?;
                let e = (x.delta1_pct - y.delta1_pct).abs().max((x.absrel - y.absrel).abs());
                ensure(e <= AFFINE_TOL, || {
                    format!(
                        "case {k} ({method}): delta1 {} vs {}, absrel {} vs {}",
                        x.delta1_pct, y.delta1_pct, x.absrel, y.absrel
                    )
                })?;
                worst = worst.max(e);
            }
        }
        Ok(format!("200 cases x {{l1, l2}}, worst difference {worst:.1e}"))
    })
}

/// Learning-rate values at the pinned iterations, compared with `==`.
pub fn lr_pins() -> Check {
    timed("learning-rate pins", || {
        let c = TrainConfig::default();
        for (i, want) in [(99, 3e-5), (25000, 3e-7), (12550, 3e-6)] {
            let got = lr_at(i, &c);
            ensure(got == want, || format!("lr_at({i}) = {got:e}, want {want:e}"))?;
        }
        Ok("lr_at(99) = 3e-5, lr_at(25000) = 3e-7, lr_at(12550) = 3e-6".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertex_minimum_matches_a_worked_case() {
        // Points on t = 2y + 1 plus one outlier: the optimum ignores it.
        let y = [0.0, 1.0, 2.0, 3.0];
        let t = [1.0, 3.0, 5.0, 100.0];
        assert!((l1_vertex_minimum(&y, &t) - 93.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn cheap_suites_pass() {
        for c in [schedule_identities(), normalization(), lr_pins()] {
            assert!(c.passed, "{c}");
        }
    }
}

//! Noise schedules and the diffusion-process algebra.
//!
//! Timesteps are 1-based: `alpha_bar(0) == 1` and `alpha_bar(T)` is the most
//! noised state. All element-wise functions work on plain slices so they can
//! be applied to latents of any layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "scaled-linear" | "scaled_linear" => Ok(Self::ScaledLinear),
            _ => Err(Error::Config(format!("unknown schedule kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// 200 steps. `beta_start` is the 1000-step value scaled by 1000/200;
    /// `beta_end` = 0.15 puts the terminal `alpha_bar` near 3.5e-6.
    fn default() -> Self {
        Self {
            timesteps: 200,
            kind: ScheduleKind::ScaledLinear,
            beta_start: 8.5e-4 * 5.0,
            beta_end: 0.15,
        }
    }
}

impl ScheduleConfig {
    /// The 1000-step schedule.
    pub fn long() -> Self {
        Self {
            timesteps: 1000,
            kind: ScheduleKind::ScaledLinear,
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.kind, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(
    timesteps: usize,
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if timesteps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (timesteps - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| match kind {
            ScheduleKind::Linear => lerp(beta_start, beta_end, i),
            ScheduleKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Config(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// `t,beta,alpha,alpha_bar` rows with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar\n");
        for t in 1..=self.timesteps() {
            out.push_str(&format!(
                "{t},{},{},{}\n",
                sig17(self.beta(t)),
                sig17(self.alpha(t)),
                sig17(self.alpha_bar(t))
            ));
        }
        out
    }
}

/// Formats with 17 significant digits like C's `%.17g` (round-trips any f64).
pub fn sig17(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.16e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if (-5..17).contains(&exp) {
        format!("{v:.*}", (16 - exp) as usize)
    } else {
        sci
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: {} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn coeffs(s: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

/// `z_t = sqrt(ab) z0 + sqrt(1 - ab) eps`.
pub fn marginal_sample(z0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(z0, eps, "marginal_sample")?;
    let (a, b) = coeffs(s, t)?;
    Ok(z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect())
}

/// `v = sqrt(ab) eps - sqrt(1 - ab) z0`.
pub fn v_target(z0: &[f64], eps: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(z0, eps, "v_target")?;
    let (a, b) = coeffs(s, t)?;
    Ok(z0.iter().zip(eps).map(|(&z, &e)| a * e - b * z).collect())
}

pub fn eps_from_v(v: &[f64], z_t: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(v, z_t, "eps_from_v")?;
    let (a, b) = coeffs(s, t)?;
    Ok(v.iter().zip(z_t).map(|(&v, &z)| a * v + b * z).collect())
}

pub fn x0_from_v(v: &[f64], z_t: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(v, z_t, "x0_from_v")?;
    let (a, b) = coeffs(s, t)?;
    Ok(v.iter().zip(z_t).map(|(&v, &z)| a * z - b * v).collect())
}

pub fn x0_from_eps(eps: &[f64], z_t: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(eps, z_t, "x0_from_eps")?;
    let (a, b) = coeffs(s, t)?;
    Ok(eps.iter().zip(z_t).map(|(&e, &z)| (z - b * e) / a).collect())
}

/// One deterministic reverse transition
/// `z_{t-1} = (z_t - (1 - a_t) / sqrt(1 - ab_t) * eps) / sqrt(a_t)`.
pub fn ddpm_reverse_step(z_t: &[f64], eps: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(z_t, eps, "ddpm_reverse_step")?;
    s.check_t(t)?;
    let a = s.alpha(t);
    let k = (1.0 - a) / (1.0 - s.alpha_bar(t)).sqrt();
    let inv = 1.0 / a.sqrt();
    Ok(z_t.iter().zip(eps).map(|(&z, &e)| inv * (z - k * e)).collect())
}

/// Deterministic DDIM jump from `t` to `t_prev` (`t_prev == 0` returns the
/// predicted clean latent).
pub fn ddim_step(
    z_t: &[f64],
    eps: &[f64],
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(Error::Ordering(format!(
            "ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}"
        )));
    }
    let x0 = x0_from_eps(eps, z_t, t, s)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let ab = s.alpha_bar(t_prev);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Timesteps `round(k T / S)` for `k = S..1`, strictly decreasing.
pub fn make_ddim_subsequence(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > timesteps {
        return Err(Error::Config(format!(
            "sampling steps must be in 1..={timesteps}, got {steps}"
        )));
    }
    let mut out: Vec<usize> = Vec::with_capacity(steps);
    for k in (1..=steps).rev() {
        let t = ((k * timesteps) as f64 / steps as f64).round() as usize;
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    Ok(out)
}

/// `(t, t_prev)` pairs walking a subsequence down to 0.
pub fn ddim_pairs(steps: &[usize]) -> Vec<(usize, usize)> {
    steps
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, steps.get(i + 1).copied().unwrap_or(0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_step() -> NoiseSchedule {
        make_schedule(2, ScheduleKind::Linear, 0.1, 0.2).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn two_step_linear_products() {
        let s = two_step();
        assert!(close(s.alpha_bar(1), 0.9, 1e-15));
        assert!(close(s.alpha_bar(2), 0.72, 1e-15));
        assert_eq!(s.alpha_bar(0), 1.0);
        let one = make_schedule(1, ScheduleKind::ScaledLinear, 0.3, 0.3).unwrap();
        assert!(close(one.alpha_bar(1), 0.7, 1e-15));
    }

    #[test]
    fn worked_values() {
        let s = two_step();
        let z2 = marginal_sample(&[1.0], 2, &[1.0], &s).unwrap()[0];
        assert!((z2 - (0.72f64.sqrt() + 0.28f64.sqrt())).abs() < 1e-15);
        assert!((z2 - 1.377679).abs() < 1e-6);
        let z1 = marginal_sample(&[1.0], 1, &[1.0], &s).unwrap()[0];
        assert!((z1 - 1.264911).abs() < 1e-6);
        let v = v_target(&[1.0], &[1.0], 2, &s).unwrap()[0];
        assert!((v - 0.319378).abs() < 1e-6);
        let back = ddpm_reverse_step(&[z2], &[1.0], 2, &s).unwrap()[0];
        let exact = (z2 - 0.2 / 0.28f64.sqrt()) / 0.8f64.sqrt();
        assert!((back - exact).abs() < 1e-15);
        // 1.1177141..., commonly quoted rounded as 1.117717
        assert!((back - 1.117717).abs() < 1e-5);
        let jump = ddim_step(&[z2], &[1.0], 2, 1, &s).unwrap()[0];
        assert!((jump - z1).abs() < 1e-14);
    }

    #[test]
    fn ddim_to_zero_returns_clean_latent() {
        let s = two_step();
        let z0 = [0.3, -1.2];
        let eps = [0.5, 2.0];
        let zt = marginal_sample(&z0, 2, &eps, &s).unwrap();
        let x = ddim_step(&zt, &eps, 2, 0, &s).unwrap();
        for (a, b) in x.iter().zip(&z0) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(matches!(ddim_step(&zt, &eps, 1, 1, &s), Err(Error::Ordering(_))));
    }

    #[test]
    fn subsequences() {
        let s = make_ddim_subsequence(1000, 50).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!((s[0], s[49]), (1000, 20));
        assert_eq!(make_ddim_subsequence(7, 7).unwrap(), vec![7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(make_ddim_subsequence(9, 1).unwrap(), vec![9]);
        assert!(make_ddim_subsequence(5, 6).is_err());
        assert_eq!(ddim_pairs(&[9, 5, 2]), vec![(9, 5), (5, 2), (2, 0)]);
    }

    #[test]
    fn default_schedules_end_heavily_noised() {
        let long = ScheduleConfig::long().build().unwrap();
        assert!(long.alpha_bar(1000) < 1e-2);
        let short = ScheduleConfig::default().build().unwrap();
        assert!(short.alpha_bar(200) < 1e-5);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(make_schedule(0, ScheduleKind::Linear, 0.1, 0.2).is_err());
        assert!(make_schedule(4, ScheduleKind::Linear, 0.3, 0.2).is_err());
        assert!(make_schedule(4, ScheduleKind::Linear, 0.0, 0.2).is_err());
        assert!(make_schedule(4, ScheduleKind::Linear, 0.1, 1.0).is_err());
    }

    #[test]
    fn csv_dump() {
        let csv = two_step().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar");
        let ab: f64 = lines[2].split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(ab, two_step().alpha_bar(2));
        assert_eq!(sig17(0.9), "0.90000000000000002");
        assert_eq!(sig17(1.2e-7), "1.1999999999999999e-7");
        assert_eq!(sig17(1.0), "1.0000000000000000");
    }
}

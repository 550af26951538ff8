//! Depth normalization, affine alignment and the δ1 / AbsRel metrics.
//!
//! Maps are flat slices with a parallel boolean mask; only masked-in pixels
//! take part in statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized depth is clamped to `[-CLAMP, CLAMP]`.
pub const CLAMP: f64 = 1.05;
pub const IRLS_MAX_ITERS: usize = 100;
pub const IRLS_TOL: f64 = 1e-10;
pub const IRLS_FLOOR: f64 = 1e-8;
pub const DELTA1_THRESHOLD: f64 = 1.25;

fn masked(values: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if values.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} values vs {} mask entries",
            values.len(),
            mask.len()
        )));
    }
    let v: Vec<f64> = values
        .iter()
        .zip(mask)
        .filter_map(|(&v, &m)| m.then_some(v))
        .collect();
    if v.is_empty() {
        return Err(Error::InvalidData("mask selects no pixels".into()));
    }
    Ok(v)
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let p = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (p.floor() as usize, p.ceil() as usize);
    let frac = p - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Linear-interpolated percentile at position `q (n - 1)` of the sorted
/// masked values.
pub fn percentile(values: &[f64], mask: &[bool], q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidData(format!("percentile q={q} outside [0, 1]")));
    }
    let mut v = masked(values, mask)?;
    v.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&v, q))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    /// Every pixel mapped (masked-out ones too), clamped to `±CLAMP`.
    pub values: Vec<f64>,
    pub y2: f64,
    pub y98: f64,
}

/// `((y - y2) / (y98 - y2) - 0.5) * 2`, clamped.
pub fn normalize_depth(values: &[f64], mask: &[bool]) -> Result<Normalized> {
    let mut v = masked(values, mask)?;
    v.sort_by(f64::total_cmp);
    let (y2, y98) = (percentile_sorted(&v, 0.02), percentile_sorted(&v, 0.98));
    if y98 <= y2 {
        return Err(Error::Degenerate(format!(
            "2% and 98% percentiles coincide ({y2})"
        )));
    }
    let span = y98 - y2;
    let values = values
        .iter()
        .map(|&y| (((y - y2) / span - 0.5) * 2.0).clamp(-CLAMP, CLAMP))
        .collect();
    Ok(Normalized { values, y2, y98 })
}

pub fn denormalize(values: &[f64], y2: f64, y98: f64) -> Result<Vec<f64>> {
    if y98 <= y2 {
        return Err(Error::Degenerate(format!(
            "denormalize needs y98 > y2, got {y2}, {y98}"
        )));
    }
    Ok(values
        .iter()
        .map(|&n| (n / 2.0 + 0.5) * (y98 - y2) + y2)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignMethod {
    L1,
    L2,
}

impl std::fmt::Display for AlignMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AlignMethod::L1 => "L1",
            AlignMethod::L2 => "L2",
        })
    }
}

impl std::str::FromStr for AlignMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L1" => Ok(Self::L1),
            "L2" => Ok(Self::L2),
            _ => Err(Error::Config(format!("unknown alignment method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub scale: f64,
    pub shift: f64,
    pub method: AlignMethod,
    /// Mean absolute residual (L1) or mean squared residual (L2).
    pub objective: f64,
    /// Reweighting rounds taken (0 for L2).
    pub iterations: usize,
    /// L1 objective after the initial fit and after every accepted round.
    pub history: Vec<f64>,
}

/// Weighted least-squares fit of `gt ≈ a pred + b`, computed around the
/// weighted means for accuracy.
fn weighted_fit(y: &[f64], t: &[f64], w: Option<&[f64]>) -> Option<(f64, f64)> {
    let wt = |i: usize| w.map_or(1.0, |w| w[i]);
    let (mut sw, mut sy, mut st) = (0.0, 0.0, 0.0);
    for i in 0..y.len() {
        sw += wt(i);
        sy += wt(i) * y[i];
        st += wt(i) * t[i];
    }
    let (my, mt) = (sy / sw, st / sw);
    let (mut syy, mut syt) = (0.0, 0.0);
    for i in 0..y.len() {
        let dy = y[i] - my;
        syy += wt(i) * dy * dy;
        syt += wt(i) * dy * (t[i] - mt);
    }
    if syy <= 0.0 || !syy.is_finite() {
        return None;
    }
    let a = syt / syy;
    Some((a, mt - a * my))
}

fn l1_objective(y: &[f64], t: &[f64], a: f64, b: f64) -> f64 {
    y.iter().zip(t).map(|(&y, &t)| (a * y + b - t).abs()).sum::<f64>() / y.len() as f64
}

fn l2_objective(y: &[f64], t: &[f64], a: f64, b: f64) -> f64 {
    y.iter()
        .zip(t)
        .map(|(&y, &t)| (a * y + b - t).powi(2))
        .sum::<f64>()
        / y.len() as f64
}

/// Fits `(scale, shift)` minimizing the masked mean of `|scale pred + shift - gt|`
/// (L1, by iteratively reweighted least squares) or its square (L2, closed form).
pub fn align_affine(pred: &[f64], gt: &[f64], mask: &[bool], method: AlignMethod) -> Result<AlignmentResult> {
    let y = masked(pred, mask)?;
    let t = masked(gt, mask)?;
    if y.len() < 2 {
        return Err(Error::InvalidData("alignment needs at least 2 valid pixels".into()));
    }
    let degenerate = || Error::Degenerate("prediction is constant under the mask".into());
    let (mut a, mut b) = weighted_fit(&y, &t, None).ok_or_else(degenerate)?;
    if method == AlignMethod::L2 {
        return Ok(AlignmentResult {
            scale: a,
            shift: b,
            method,
            objective: l2_objective(&y, &t, a, b),
            iterations: 0,
            history: Vec::new(),
        });
    }
    let mut obj = l1_objective(&y, &t, a, b);
    let mut history = vec![obj];
    let mut iterations = 0;
    let mut w = vec![0.0; y.len()];
    while iterations < IRLS_MAX_ITERS {
        for i in 0..y.len() {
            w[i] = 1.0 / (a * y[i] + b - t[i]).abs().max(IRLS_FLOOR);
        }
        let Some((na, nb)) = weighted_fit(&y, &t, Some(&w)) else { break };
        let nobj = l1_objective(&y, &t, na, nb);
        iterations += 1;
        // A round that does not improve the objective is rejected; the
        // reported sequence is therefore non-increasing.
        if !(nobj <= obj) {
            break;
        }
        let step = (na - a).abs().max((nb - b).abs());
        a = na;
        b = nb;
        obj = nobj;
        history.push(obj);
        if step < IRLS_TOL {
            break;
        }
    }
    if let Some((pa, pb, pobj)) = pivot_descent(&y, &t, a, b) {
        if pobj < obj {
            (a, b, obj) = (pa, pb, pobj);
            history.push(obj);
        }
    }
    Ok(AlignmentResult {
        scale: a,
        shift: b,
        method,
        objective: obj,
        iterations,
        history,
    })
}

/// Exact L1 finish. For a line forced through data point `k` the best slope
/// is the weighted median of `(t_j - t_k) / (y_j - y_k)` with weights
/// `|y_j - y_k|`; the pivot then moves to the point that median came from.
/// Starts from the point closest to the line `a y + b`.
fn pivot_descent(y: &[f64], t: &[f64], a: f64, b: f64) -> Option<(f64, f64, f64)> {
    let mut k = (0..y.len()).min_by(|&i, &j| {
        (a * y[i] + b - t[i]).abs().total_cmp(&(a * y[j] + b - t[j]).abs())
    })?;
    let mut best: Option<(f64, f64, f64)> = None;
    let mut slopes = Vec::with_capacity(y.len());
    for _ in 0..y.len() {
        slopes.clear();
        slopes.extend(
            (0..y.len())
                .filter(|&j| y[j] != y[k])
                .map(|j| ((t[j] - t[k]) / (y[j] - y[k]), (y[j] - y[k]).abs(), j)),
        );
        if slopes.is_empty() {
            return best;
        }
        slopes.sort_by(|p, q| p.0.total_cmp(&q.0));
        let half = slopes.iter().map(|s| s.1).sum::<f64>() / 2.0;
        let mut acc = 0.0;
        let &(slope, _, m) = slopes
            .iter()
            .find(|s| {
                acc += s.1;
                acc >= half
            })
            .unwrap_or(slopes.last()?);
        let shift = t[k] - slope * y[k];
        let obj = l1_objective(y, t, slope, shift);
        if best.is_some_and(|(_, _, o)| obj >= o) {
            break;
        }
        best = Some((slope, shift, obj));
        k = m;
    }
    best
}

/// Percentage of masked pixels with `max(p / g, g / p) < 1.25`; non-positive
/// predictions count as failures.
pub fn delta1(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    let p = masked(pred, mask)?;
    let g = masked(gt, mask)?;
    let hits = p
        .iter()
        .zip(&g)
        .filter(|(&p, &g)| p > 0.0 && g > 0.0 && (p / g).max(g / p) < DELTA1_THRESHOLD)
        .count();
    Ok(100.0 * hits as f64 / p.len() as f64)
}

/// Masked mean of `|g - p| / g`.
pub fn absrel(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    let p = masked(pred, mask)?;
    let g = masked(gt, mask)?;
    Ok(p.iter().zip(&g).map(|(&p, &g)| (g - p).abs() / g).sum::<f64>() / p.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub image_id: String,
    pub alpha: f64,
    pub beta: f64,
    pub method: AlignMethod,
    pub delta1_pct: f64,
    pub absrel: f64,
    pub valid_px: usize,
}

/// Aligns `pred` to `gt` and scores the aligned map.
pub fn evaluate_pair(pred: &[f64], gt: &[f64], mask: &[bool], method: AlignMethod) -> Result<MetricsRecord> {
    let fit = align_affine(pred, gt, mask, method)?;
    let aligned: Vec<f64> = pred.iter().map(|&p| fit.scale * p + fit.shift).collect();
    Ok(MetricsRecord {
        image_id: String::new(),
        alpha: fit.scale,
        beta: fit.shift,
        method,
        delta1_pct: delta1(&aligned, gt, mask)?,
        absrel: absrel(&aligned, gt, mask)?,
        valid_px: mask.iter().filter(|&&m| m).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub delta1_pct: f64,
    pub absrel: f64,
    pub valid_px: usize,
    pub images: usize,
}

/// Unweighted per-image means.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::InvalidData("no records to aggregate".into()));
    }
    let n = records.len() as f64;
    Ok(Aggregate {
        delta1_pct: records.iter().map(|r| r.delta1_pct).sum::<f64>() / n,
        absrel: records.iter().map(|r| r.absrel).sum::<f64>() / n,
        valid_px: records.iter().map(|r| r.valid_px).sum(),
        images: records.len(),
    })
}

pub const METRICS_HEADER: &str = "image_id,alpha,beta,method,delta1_pct,absrel,valid_px";

/// Per-image rows plus a final `AGGREGATE` row.
pub fn metrics_csv(records: &[MetricsRecord]) -> Result<String> {
    let agg = aggregate(records)?;
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        // `+ 0.0` prints -0 as 0.
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.image_id,
            r.alpha + 0.0,
            r.beta + 0.0,
            r.method,
            r.delta1_pct,
            r.absrel,
            r.valid_px
        ));
    }
    out.push_str(&format!(
        "AGGREGATE,,,{},{},{},{}\n",
        records[0].method, agg.delta1_pct, agg.absrel, agg.valid_px
    ));
    Ok(out)
}

use lcdepth::codec::{self, LatentTensor, Provenance};
use lcdepth::config::Config;
use lcdepth::depthmetrics::{self, AlignMethod};
use lcdepth::raster::Raster;
use lcdepth::schedule::{self, make_schedule, ScheduleKind};
use lcdepth::trainer::{lr_at, TrainConfig};
use proptest::prelude::*;

fn raster(h: usize, w: usize, c: usize) -> impl Strategy<Value = Raster<f64>> {
    prop::collection::vec(-10.0..10.0f64, h * w * c).prop_map(move |d| Raster::new(h, w, c, d).unwrap())
}

fn sized_raster() -> impl Strategy<Value = Raster<f64>> {
    (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(h, w, c)| raster(2 * h, 2 * w, c))
}

/// Ground truth in `[1, 9]` and a noisy prediction of it, with a mask that
/// keeps at least two pixels.
fn depth_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (8usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(1.0..9.0f64, n),
            prop::collection::vec(-0.5..0.5f64, n),
            prop::collection::vec(prop::bool::weighted(0.85), n),
            0.05..2.0f64,
            -3.0..3.0f64,
        )
            .prop_map(|(gt, noise, mut mask, s, o)| {
                let pred = gt.iter().zip(&noise).map(|(g, e)| s * g + o + e).collect();
                mask[..2].fill(true);
                (pred, gt, mask)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codec_round_trips_and_permutes_entries(r in sized_raster()) {
        let z = codec::encode(&r, Provenance::DepthLatent).unwrap();
        prop_assert_eq!((z.height, z.width, z.channels), (r.height / 2, r.width / 2, r.channels * 4));
        prop_assert_eq!(&codec::decode(&z).unwrap(), &r);
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        prop_assert_eq!(sorted(&z.data), sorted(&r.data));
        let planes = z.to_planes();
        let back = LatentTensor::from_planes(z.height, z.width, z.channels, &planes, Provenance::Noise).unwrap();
        prop_assert_eq!(back.data, z.data);
    }

    #[test]
    fn codec_is_linear((x, y) in (1usize..4, 1usize..4).prop_flat_map(|(h, w)| (raster(2 * h, 2 * w, 1), raster(2 * h, 2 * w, 1))),
                       a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mix = Raster::new(x.height, x.width, 1, x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let zx = codec::encode(&x, Provenance::DepthLatent).unwrap();
        let zy = codec::encode(&y, Provenance::DepthLatent).unwrap();
        let zm = codec::encode(&mix, Provenance::DepthLatent).unwrap();
        for ((m, p), q) in zm.data.iter().zip(&zx.data).zip(&zy.data) {
            prop_assert_eq!(*m, a * p + b * q);
        }
    }

    #[test]
    fn parameterizations_round_trip(tt in 2usize..400, frac in 0.0..1.0f64, seed in any::<u64>()) {
        let s = make_schedule(tt, ScheduleKind::ScaledLinear, 1e-3, 0.05).unwrap();
        let t = 1 + ((tt - 1) as f64 * frac) as usize;
        let mut r = lcdepth::rng::stream(seed, &[]);
        let z0 = lcdepth::rng::standard_normal(&mut r, 16);
        let eps = lcdepth::rng::standard_normal(&mut r, 16);
        let zt = schedule::marginal_sample(&z0, t, &eps, &s).unwrap();
        let v = schedule::v_target(&z0, &eps, t, &s).unwrap();
        let back_eps = schedule::eps_from_v(&v, &zt, t, &s).unwrap();
        let back_x0 = schedule::x0_from_v(&v, &zt, t, &s).unwrap();
        for i in 0..16 {
            prop_assert!((back_eps[i] - eps[i]).abs() <= 1e-10 * (1.0 + eps[i].abs()));
            prop_assert!((back_x0[i] - z0[i]).abs() <= 1e-10 * (1.0 + z0[i].abs()));
        }
    }

    #[test]
    fn alpha_bar_is_decreasing_in_unit_interval(tt in 1usize..1000, b0 in 1e-5..1e-2f64, extra in 0.0..0.3f64,
                                               linear in any::<bool>()) {
        let kind = if linear { ScheduleKind::Linear } else { ScheduleKind::ScaledLinear };
        let s = make_schedule(tt, kind, b0, b0 + extra).unwrap();
        let mut prev = 1.0;
        for t in 1..=tt {
            let ab = s.alpha_bar(t);
            prop_assert!(ab > 0.0 && ab < prev);
            prev = ab;
        }
    }

    #[test]
    fn ddim_subsequence_is_strictly_decreasing(tt in 1usize..1000, steps_frac in 0.0..1.0f64) {
        let steps = 1 + ((tt - 1) as f64 * steps_frac) as usize;
        let seq = schedule::make_ddim_subsequence(tt, steps).unwrap();
        prop_assert_eq!(seq[0], tt);
        prop_assert!(seq.len() <= steps);
        prop_assert!(seq.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(*seq.last().unwrap() >= 1);
    }

    #[test]
    fn evaluation_is_affine_invariant((pred, gt, mask) in depth_case(), a in 0.1..10.0f64, b in -5.0..5.0f64,
                                      l1 in any::<bool>()) {
        let method = if l1 { AlignMethod::L1 } else { AlignMethod::L2 };
        let moved: Vec<f64> = pred.iter().map(|p| a * p + b).collect();
        let x = depthmetrics::evaluate_pair(&pred, &gt, &mask, method).unwrap();
        let y = depthmetrics::evaluate_pair(&moved, &gt, &mask, method).unwrap();
        prop_assert!((x.delta1_pct - y.delta1_pct).abs() <= 1e-9);
        prop_assert!((x.absrel - y.absrel).abs() <= 1e-9);
    }

    #[test]
    fn metrics_stay_in_range((pred, gt, mask) in depth_case()) {
        let d = depthmetrics::delta1(&pred, &gt, &mask).unwrap();
        let a = depthmetrics::absrel(&pred, &gt, &mask).unwrap();
        prop_assert!((0.0..=100.0).contains(&d));
        prop_assert!(a >= 0.0);
        prop_assert_eq!(depthmetrics::delta1(&gt, &gt, &mask).unwrap(), 100.0);
        prop_assert_eq!(depthmetrics::absrel(&gt, &gt, &mask).unwrap(), 0.0);
    }

    #[test]
    fn l1_alignment_is_never_worse_than_l2((pred, gt, mask) in depth_case()) {
        let l1 = depthmetrics::align_affine(&pred, &gt, &mask, AlignMethod::L1).unwrap();
        let l2 = depthmetrics::align_affine(&pred, &gt, &mask, AlignMethod::L2).unwrap();
        let l1_of = |a: f64, b: f64| {
            let v: Vec<f64> = pred.iter().zip(&gt).zip(&mask).filter(|x| *x.1).map(|((p, g), _)| (a * p + b - g).abs()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        prop_assert!(l1.objective <= l1_of(l2.scale, l2.shift) + 1e-12);
        prop_assert!(l1.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn normalization_ignores_positive_affine_maps((_, gt, mask) in depth_case(), a in 0.1..10.0f64, b in -5.0..5.0f64) {
        let Ok(base) = depthmetrics::normalize_depth(&gt, &mask) else { return Ok(()) };
        let moved: Vec<f64> = gt.iter().map(|y| a * y + b).collect();
        let m = depthmetrics::normalize_depth(&moved, &mask).unwrap();
        for (x, y) in base.values.iter().zip(&m.values) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        prop_assert!(base.values.iter().all(|v| v.abs() <= depthmetrics::CLAMP));
    }

    #[test]
    fn learning_rate_stays_in_band(i in 0usize..60_000) {
        let c = TrainConfig::default();
        let lr = lr_at(i, &c);
        prop_assert!(lr <= c.lr0 && lr >= c.lr0 * c.lr_floor * (1.0 - 1e-12));
        if i >= c.warmup {
            prop_assert!(lr_at(i + 1, &c) <= lr);
        }
    }

    #[test]
    fn config_overrides_round_trip(lr in 1e-8..1.0f64, steps in 1usize..200, seed in any::<u64>()) {
        let c = Config::default()
            .with_overrides([
                ("train.lr0", lr.to_string().as_str()),
                ("infer.steps", steps.to_string().as_str()),
                ("seed", seed.to_string().as_str()),
            ])
            .unwrap();
        prop_assert_eq!(c.train.lr0, lr);
        prop_assert_eq!(c.infer.steps, steps);
        prop_assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
    }
}

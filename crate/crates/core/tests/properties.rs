use apt_core::config::RunConfig;
use apt_core::diff::{cosine_lr, Tensor};
use apt_core::encoders::tokenizer::tokenize;
use apt_core::encoders::LocalityMask;
use apt_core::feature_gen::{inject_noise, threshold_mask, CfgConfig, NoiseScale, TF_THRESHOLD};
use apt_core::io::Checkpoint;
use apt_core::metrics::{auroc, auroc_pairs};
use apt_core::scoring::{fuse_scores, upsample};
use apt_core::tuning::{bernoulli_kl, calibrate_gradient};
use proptest::prelude::*;

fn labelled(max: usize) -> impl Strategy<Value = (Vec<f32>, Vec<u8>)> {
    (2..max).prop_flat_map(|n| {
        (
            prop::collection::vec(-4i32..4, n).prop_map(|v| v.into_iter().map(|x| x as f32 * 0.5).collect()),
            prop::collection::vec(0u8..2, n),
        )
    })
    .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
}

fn unit_rows(rows: usize, d: usize, raw: &[f32]) -> Tensor {
    let mut t = Tensor::new(vec![rows, d], raw.to_vec()).unwrap();
    for i in 0..rows {
        let r = t.row_mut(i);
        let n = r.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-3);
        r.iter_mut().for_each(|x| *x /= n);
    }
    t
}

proptest! {
    #[test]
    fn auroc_matches_pair_counting((s, l) in labelled(40)) {
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc_pairs(&s, &l).unwrap());
    }

    #[test]
    fn auroc_is_rank_invariant((s, l) in labelled(40)) {
        let mapped: Vec<f32> = s.iter().map(|&x| 3.0 * x + 7.0).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&mapped, &l).unwrap());
    }

    #[test]
    fn auroc_complement((s, l) in labelled(40)) {
        let flipped: Vec<u8> = l.iter().map(|&x| 1 - x).collect();
        let a = auroc(&s, &l).unwrap();
        let b = auroc(&s, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn calibration_geometry(
        a in prop::collection::vec(-5.0f64..5.0, 8),
        d in prop::collection::vec(-5.0f64..5.0, 8),
        lambda in 0.0f64..3.0,
    ) {
        let c = calibrate_gradient(&a, &d, lambda).unwrap();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        if c.cosine >= 0.0 {
            prop_assert!(!c.calibrated);
            prop_assert!(c.grad.iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()));
        } else {
            let delta = dot(&c.grad, &d) - dot(&a, &d);
            let expect = -lambda * c.cosine * dot(&d, &d);
            prop_assert!((delta - expect).abs() <= 1e-9 * expect.abs().max(1e-9));
        }
        prop_assert!((-1.0..=1.0).contains(&c.cosine));
    }

    #[test]
    fn noise_respects_masks(
        raw in prop::collection::vec(-1.0f32..1.0, 36 * 8),
        object in prop::collection::vec(0u8..2, 36),
        cap in 0.05f64..1.0,
        sigma in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        prop_assume!(object.contains(&1));
        let f = unit_rows(36, 8, &raw);
        let cfg = CfgConfig {
            sigma: NoiseScale::Absolute(sigma),
            anomaly_fraction_cap: cap,
            regenerate_noise_each_epoch: true,
        };
        let s = inject_noise(&f, &object, &cfg, seed, 0).unwrap();
        for i in 0..36 {
            if s.anomaly_mask[i] == 1 {
                prop_assert_eq!(object[i], 1);
                let n: f32 = s.features.row(i).iter().map(|x| x * x).sum();
                prop_assert!((n - 1.0).abs() < 1e-5);
            } else {
                prop_assert!(s.features.row(i).iter().zip(f.row(i)).all(|(a, b)| a.to_bits() == b.to_bits()));
                prop_assert!(s.noise.row(i).iter().all(|&x| x == 0.0));
            }
        }
        let again = inject_noise(&f, &object, &cfg, seed, 0).unwrap();
        prop_assert_eq!(again.features, s.features);
    }

    #[test]
    fn threshold_is_strict(scores in prop::collection::vec(-1.0f32..1.0, 1..50)) {
        let mut s = scores;
        s.push(TF_THRESHOLD);
        let m = threshold_mask(&s);
        prop_assert_eq!(*m.last().unwrap(), 0);
        for (x, b) in s.iter().zip(&m) {
            prop_assert_eq!(*b == 1, *x > TF_THRESHOLD);
        }
    }

    #[test]
    fn fused_score_is_two_class_softmax(la in -1.0f32..1.0, ln in -1.0f32..1.0, tau in 0.01f32..1.0) {
        let s = fuse_scores(&[la], &[ln], tau).unwrap().values[0] as f64;
        let (a, n) = (la as f64 / tau as f64, ln as f64 / tau as f64);
        let soft = 1.0 / (1.0 + (n - a).exp());
        prop_assert!((s - soft).abs() < 1e-6);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn kl_is_nonnegative(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
        prop_assert!(bernoulli_kl(p, q) >= 0.0);
        prop_assert_eq!(bernoulli_kl(p, p), 0.0);
    }

    #[test]
    fn cosine_schedule_decays(base in 1e-6f64..1.0, horizon in 1usize..500) {
        let mut prev = f64::INFINITY;
        for n in 0..=horizon {
            let lr = cosine_lr(base, n, horizon);
            prop_assert!(lr <= prev + 1e-15 && lr >= 0.0 && lr <= base);
            prev = lr;
        }
        prop_assert!(cosine_lr(base, horizon, horizon).abs() < 1e-12 * base.max(1.0));
    }

    #[test]
    fn upsample_keeps_corners_and_range(vals in prop::collection::vec(0.0f32..1.0, 16), h in 4usize..40) {
        let up = upsample(&vals, 4, 4, h, h);
        prop_assert_eq!(up[0], vals[0]);
        prop_assert_eq!(up[h - 1], vals[3]);
        prop_assert_eq!(up[h * h - 1], vals[15]);
        let (lo, hi) = vals.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(up.iter().all(|&x| x >= lo - 1e-6 && x <= hi + 1e-6));
    }

    #[test]
    fn locality_mask_is_symmetric(g in 2usize..9, k in 0.5f64..4.0) {
        let m = LocalityMask::new(g, k);
        for q in 0..m.tokens() {
            prop_assert!(m.is_open(q, q));
            for key in 0..m.tokens() {
                prop_assert_eq!(m.is_open(q, key), m.is_open(key, q));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..3), 1..5),
        seed in any::<u32>(),
    ) {
        let mut c = Checkpoint::new();
        for (i, s) in shapes.iter().enumerate() {
            let n: usize = s.iter().product();
            let data = (0..n).map(|j| f32::from_bits(seed.wrapping_add((i * 31 + j) as u32) & 0x7f7f_ffff)).collect();
            c.insert(format!("t{i}"), Tensor::new(s.clone(), data).unwrap());
        }
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes.clone());
        for cut in [bytes.len() - 1, 9 + 2] {
            prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn tokens_stay_in_vocab(words in prop::collection::vec("[a-zA-Z.,!]{1,8}", 1..10)) {
        let text = words.join(" ");
        if let Ok(ids) = tokenize(&text, 4096) {
            prop_assert!(ids.iter().all(|&i| (1..4096).contains(&i)));
        }
    }

    #[test]
    fn config_text_round_trip(seed in any::<u64>(), lambda in 0.0f64..4.0, so in any::<bool>(), la in any::<bool>()) {
        let cfg = RunConfig { seed, lambda, enable_so: so, enable_la: la, ..RunConfig::default() };
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

use proptest::prelude::*;

use transnext::backbone::{count_flops, AnyTensor, Archive, MacConvention, MixerKind, Mode, ModelConfig, PoolMode, StageConfig, HEAD_DIM};
use transnext::kernel::{fused_window_av, fused_window_qk, naive_unfold_av, naive_unfold_qk};
use transnext::oracle::{self, rand_tensor, rng, softmax_direct};
use transnext::pfa::{build_geometry, pfa_concat_oracle, pfa_forward};
use transnext::tensor::{adaptive_avg_pool, softmax};
use transnext::Tensor;

fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    (1usize..=8, 1usize..=8, prop::sample::select(vec![1usize, 3, 5, 7]))
        .prop_flat_map(|(h, w, k)| (Just(h), Just(w), Just(k), 1..=h, 1..=w))
}

fn stage() -> impl Strategy<Value = StageConfig> {
    let attn = (1usize..=4, 1usize..=3, 1usize..=8, prop::sample::select(vec![1usize, 3, 5, 7]), any::<bool>(), 1usize..=9)
        .prop_map(|(m, blocks, mlp_ratio, k, fixed, pool)| StageConfig {
            channels: m * HEAD_DIM,
            blocks,
            mlp_ratio,
            mixer: MixerKind::Aggregated,
            window: Some(k),
            pool_mode: Some(if fixed { PoolMode::Fixed } else { PoolMode::Ratio }),
            pool: Some(pool),
        });
    let global = (1usize..=4, 1usize..=3, 1usize..=8).prop_map(|(m, blocks, mlp_ratio)| StageConfig {
        channels: m * HEAD_DIM,
        blocks,
        mlp_ratio,
        mixer: MixerKind::Mhsa,
        window: None,
        pool_mode: None,
        pool: None,
    });
    prop_oneof![attn, global]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_normalizes_and_zeroes_masked(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..12, scale in 0.1f64..50.0) {
        let x = rand_tensor(&mut rng(seed), &[rows, cols]).scale(scale);
        let mask = Tensor::from_fn(&[rows, cols], |i| i % cols != seed as usize % cols && (i * 7 + seed as usize).is_multiple_of(3)).unwrap();
        let y = softmax(&x, Some(&mask)).unwrap();
        for (r, row) in y.data().chunks(cols).enumerate() {
            let m = &mask.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let kept: Vec<f64> = x.data()[r * cols..(r + 1) * cols].iter().zip(m).filter(|(_, &m)| !m).map(|(v, _)| *v).collect();
            let direct = softmax_direct(&kept);
            let mut it = direct.iter();
            for (v, &masked) in row.iter().zip(m) {
                if masked {
                    prop_assert_eq!(*v, 0.0);
                } else {
                    prop_assert!((v - it.next().unwrap()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fused_matches_naive((h, w, k, _, _) in geometry(), heads in 1usize..3, d in 1usize..6, seed in any::<u64>()) {
        let g = build_geometry(h, w, k, 1, 1).unwrap();
        let mut r = rng(seed);
        let q = rand_tensor(&mut r, &[heads, h, w, d]);
        let kk = rand_tensor(&mut r, &[heads, h, w, d]);
        let a = rand_tensor(&mut r, &[heads, h, w, k * k]);
        prop_assert_eq!(fused_window_qk(&q, &kk, &g).unwrap(), naive_unfold_qk(&q, &kk, &g).unwrap());
        prop_assert_eq!(fused_window_av(&a, &kk, &g).unwrap(), naive_unfold_av(&a, &kk, &g).unwrap());
    }

    #[test]
    fn dual_path_matches_concat((h, w, k, ph, pw) in geometry(), heads in 1usize..3, d in 1usize..4, seed in any::<u64>()) {
        let g = build_geometry(h, w, k, ph, pw).unwrap();
        let mut r = rng(seed);
        let p = oracle::random_pfa_params::<f64>(&mut r, heads, d, k);
        let x = rand_tensor(&mut r, &[heads * d, h, w]);
        let dual = pfa_forward(&x, &p, &g).unwrap();
        let concat = pfa_concat_oracle(&x, &p, &g).unwrap();
        prop_assert!(dual.max_abs_diff(&concat).unwrap() <= 1e-12);
    }

    #[test]
    fn pooling_preserves_constants(c in 1usize..4, h in 1usize..12, w in 1usize..12, oh in 1usize..12, ow in 1usize..12, v in -5.0f64..5.0) {
        let (oh, ow) = (oh.min(h), ow.min(w));
        let x = Tensor::full(&[c, h, w], v).unwrap();
        let y = adaptive_avg_pool(&x, oh, ow).unwrap();
        prop_assert_eq!(y.dims(), [c, oh, ow]);
        prop_assert!(y.data().iter().all(|&p| (p - v).abs() < 1e-12));
    }

    #[test]
    fn config_text_round_trips(stages in prop::collection::vec(stage(), 1..5)) {
        let cfg = ModelConfig::from_stages(stages);
        prop_assume!(cfg.validate().is_ok());
        let text = cfg.to_config_string();
        let back: ModelConfig = text.parse().unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_config_string(), text);
    }

    #[test]
    fn archive_round_trips(
        entries in prop::collection::btree_map("[a-z][a-z0-9._]{0,12}", (prop::collection::vec(1usize..4, 1..4), any::<bool>(), any::<u64>()), 0..6)
    ) {
        let mut a = Archive::new();
        for (name, (dims, wide, seed)) in &entries {
            let t = rand_tensor(&mut rng(*seed), dims);
            a.insert(name.clone(), if *wide { AnyTensor::F64(t) } else { AnyTensor::F32(t.cast()) });
        }
        let bytes = a.to_bytes().unwrap();
        let back = Archive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        for cut in [0, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(Archive::from_bytes(&bytes[..cut]).is_err());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn windowed_stages_scale_linearly_in_pixels(scale in 1usize..5, variant in prop::sample::select(vec!["micro", "tiny"])) {
        let cfg = ModelConfig::stock(variant).unwrap();
        let side = 224 * scale;
        let one = count_flops(&cfg, side, side, Mode::Linear).unwrap();
        let two = count_flops(&cfg, 2 * side, 2 * side, Mode::Linear).unwrap();
        let (a, b) = (one.per_stage(MacConvention::Mac1), two.per_stage(MacConvention::Mac1));
        for ((s, _, f1), (_, _, f2)) in a.into_iter().zip(b).filter(|((s, _, _), _)| (1..=3).contains(s)) {
            let ratio = f2 as f64 / f1 as f64;
            prop_assert!(ratio <= 4.0 && ratio > 3.5, "stage {} ratio {}", s, ratio);
        }
        let normal = count_flops(&cfg, side, side, Mode::Normal).unwrap();
        prop_assert!(normal.total_macs() >= one.total_macs());
        prop_assert!(one.total_flops(MacConvention::Mac2) >= 2 * one.total_flops(MacConvention::Mac1));
        prop_assert_eq!(one.total_params(), normal.total_params());
    }
}

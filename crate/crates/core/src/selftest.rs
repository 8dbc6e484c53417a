//! Built-in oracle suites, run by `transnext selftest`.
//!
//! Every suite compares an optimized path against an independent reference
//! or checks an invariant at small scale, and finishes in well under a
//! second.

use crate::attention::{
    aggregated_attention_forward, build_relative_coords, log_cpb, mhsa_stage4_forward, Similarity, CPB_HIDDEN,
};
use crate::backbone::erf::{erf_saliency, ErfOptions, ErfToy, TOY_CHANNELS};
use crate::backbone::{count_flops, Archive, Mode, Model, ModelConfig, MixerKind, PoolMode, StageConfig};
use crate::conv_glu::{conv_ffn_flops, conv_glu_flops, conv_glu_forward, GluVariant};
use crate::kernel::{fused_window_av, fused_window_qk, naive_unfold_av, naive_unfold_qk};
use crate::oracle::{self, rand_tensor, rng};
use crate::pfa::{activate_and_pool, build_geometry, pfa_attention_weights, pfa_concat_oracle, pfa_forward};
use crate::tensor::{conv2d, counter, depthwise_conv3x3, matmul, softmax, LinearParams, Tensor};

type Outcome = std::result::Result<(), String>;

#[derive(Debug)]
pub struct Suite {
    pub name: &'static str,
    pub invariant: &'static str,
    pub run: fn() -> Outcome,
}

fn close(name: &str, got: &Tensor<f64>, want: &Tensor<f64>, tol: f64) -> Outcome {
    let err = got.max_abs_diff(want).map_err(|e| format!("{name}: {e}"))?;
    if err <= tol {
        Ok(())
    } else {
        Err(format!("{name}: max abs diff {err:.3e} > {tol:.1e}"))
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: crate::Error) -> String {
    e.to_string()
}

fn matmul_suite() -> Outcome {
    let mut r = rng(100);
    for (m, k, n) in [(1, 1, 1), (5, 7, 3), (16, 9, 11)] {
        let a = rand_tensor(&mut r, &[m, k]);
        let b = rand_tensor(&mut r, &[k, n]);
        close("matmul", &matmul(&a, &b).map_err(e2s)?, &oracle::matmul_naive(&a, &b), 1e-12)?;
    }
    Ok(())
}

fn softmax_suite() -> Outcome {
    let mut r = rng(101);
    let x = rand_tensor(&mut r, &[4, 9]).scale(10.0);
    let mask = Tensor::from_fn(&[4, 9], |i| i % 4 == 1).map_err(e2s)?;
    let got = softmax(&x, Some(&mask)).map_err(e2s)?;
    for (row, (xr, mr)) in got.data().chunks(9).zip(x.data().chunks(9).zip(mask.data().chunks(9))) {
        let kept: Vec<f64> = xr.iter().zip(mr).filter(|(_, &m)| !m).map(|(&v, _)| v).collect();
        let want = oracle::softmax_direct(&kept);
        let mut it = want.iter();
        for (&g, &m) in row.iter().zip(mr) {
            let w = if m { 0.0 } else { *it.next().expect("same count") };
            ensure(if m { g == 0.0 } else { (g - w).abs() <= 1e-12 }, || format!("softmax: {g} vs {w}"))?;
        }
    }
    Ok(())
}

fn conv_suite() -> Outcome {
    let mut r = rng(102);
    let x = rand_tensor(&mut r, &[3, 9, 11]);
    for (k, s, p) in [(7, 4, 3), (3, 2, 1), (3, 1, 1)] {
        let f = rand_tensor(&mut r, &[5, 3, k, k]);
        let b = rand_tensor(&mut r, &[5]);
        close("conv2d", &conv2d(&x, &f, Some(&b), s, p).map_err(e2s)?, &oracle::conv2d_naive(&x, &f, Some(&b), s, p), 1e-12)?;
    }
    let f = rand_tensor(&mut r, &[3, 3, 3]);
    let b = rand_tensor(&mut r, &[3]);
    close("depthwise", &depthwise_conv3x3(&x, &f, &b).map_err(e2s)?, &oracle::depthwise_conv_naive(&x, &f, &b), 1e-12)
}

fn pool_suite() -> Outcome {
    let mut r = rng(103);
    let p = oracle::random_pfa_params::<f64>(&mut r, 2, 3, 3);
    for (h, w, ph, pw) in [(5, 7, 2, 3), (6, 6, 6, 6), (9, 4, 1, 1)] {
        let g = build_geometry(h, w, 3, ph, pw).map_err(e2s)?;
        let x = rand_tensor(&mut r, &[6, h, w]);
        let want = oracle::activate_and_pool_composed(&x, &p.pool_proj, &p.pool_norm, ph, pw);
        close("activate-and-pool", &activate_and_pool(&x, &p, &g).map_err(e2s)?, &want, 1e-12)?;
    }
    Ok(())
}

fn pfa_concat_suite() -> Outcome {
    let mut r = rng(104);
    for (h, w, k, ph, pw) in [(5, 7, 3, 2, 3), (4, 4, 5, 1, 1), (6, 3, 3, 3, 3)] {
        let g = build_geometry(h, w, k, ph, pw).map_err(e2s)?;
        let p = oracle::random_pfa_params::<f64>(&mut r, 2, 3, k);
        let x = rand_tensor(&mut r, &[6, h, w]);
        let dual = pfa_forward(&x, &p, &g).map_err(e2s)?;
        close("dual vs concatenated", &dual, &pfa_concat_oracle(&x, &p, &g).map_err(e2s)?, 1e-12)?;
        close("dual vs scalar", &dual, &oracle::scalar_pfa(&x, &p, &g), 1e-12)?;
    }
    Ok(())
}

fn mask_suite() -> Outcome {
    let mut r = rng(105);
    let g = build_geometry(6, 6, 3, 2, 2).map_err(e2s)?;
    let p = oracle::random_pfa_params::<f64>(&mut r, 2, 4, 3);
    let x = rand_tensor(&mut r, &[8, 6, 6]);
    let wts = pfa_attention_weights(&x, &p, &g).map_err(e2s)?;
    let cols = 9 + 4;
    for (row_i, row) in wts.data().chunks(cols).enumerate() {
        let pix = row_i % 36;
        let mask = &g.mask().data()[pix * 9..][..9];
        for (s, &m) in mask.iter().enumerate() {
            ensure(!m || row[s] == 0.0, || format!("masked slot {s} of pixel {pix} has weight {}", row[s]))?;
        }
        let sum: f64 = row.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-6, || format!("row {row_i} sums to {sum}"))?;
    }
    Ok(())
}

fn kernel_suite() -> Outcome {
    let mut r = rng(106);
    for (h, w, k) in [(5, 7, 3), (9, 10, 5), (3, 3, 3)] {
        let g = build_geometry(h, w, k, 1, 1).map_err(e2s)?;
        let q = rand_tensor(&mut r, &[2, h, w, 5]);
        let kk = rand_tensor(&mut r, &[2, h, w, 5]);
        let a = fused_window_qk(&q, &kk, &g).map_err(e2s)?;
        ensure(a == naive_unfold_qk(&q, &kk, &g).map_err(e2s)?, || format!("fused qk differs from unfold at {h}x{w} k={k}"))?;
        let attn = rand_tensor(&mut r, &[2, h, w, k * k]);
        let o = fused_window_av(&attn, &kk, &g).map_err(e2s)?;
        ensure(o == naive_unfold_av(&attn, &kk, &g).map_err(e2s)?, || format!("fused av differs from unfold at {h}x{w} k={k}"))?;
    }
    Ok(())
}

fn backward_suite() -> Outcome {
    let mut r = rng(107);
    let g = build_geometry(4, 4, 3, 1, 1).map_err(e2s)?;
    let err = oracle::window_backward_fd_error(&mut r, &g, 1, 3);
    ensure(err <= 1e-6, || format!("backward vs finite differences: relative error {err:.3e}"))
}

fn aggregated_suite() -> Outcome {
    let mut r = rng(108);
    for (h, w, ph, pw) in [(5, 6, 2, 3), (4, 4, 1, 1)] {
        let g = build_geometry(h, w, 3, ph, pw).map_err(e2s)?;
        let coords = build_relative_coords(h, w, ph, pw, 8, 8).map_err(e2s)?;
        let p = oracle::random_agg_params::<f64>(&mut r, 2, 3, 3);
        let x = rand_tensor(&mut r, &[6, h, w]);
        let got = aggregated_attention_forward(&x, &p, &g, &coords).map_err(e2s)?;
        close("aggregated vs scalar", &got, &oracle::scalar_aggregated(&x, &p, &g, &coords), 1e-12)?;
    }
    Ok(())
}

fn degeneracy_suite() -> Outcome {
    let mut r = rng(109);
    let g = build_geometry(5, 7, 3, 2, 3).map_err(e2s)?;
    let coords = build_relative_coords(5, 7, 2, 3, 5, 7).map_err(e2s)?;
    let mut p = oracle::random_agg_params::<f64>(&mut r, 2, 3, 3);
    p.qe = Some(Tensor::zeros(&[2, 3]).map_err(e2s)?);
    p.pos_tokens = Some(Tensor::zeros(&[2, 3, 9]).map_err(e2s)?);
    p.cpb.fc2 = LinearParams::new(Tensor::zeros(&[2, CPB_HIDDEN]).map_err(e2s)?, Some(Tensor::zeros(&[2]).map_err(e2s)?))
        .map_err(e2s)?;
    p.similarity = Similarity::ScaledDot;
    let x = rand_tensor(&mut r, &[6, 5, 7]);
    let aa = aggregated_attention_forward(&x, &p, &g, &coords).map_err(e2s)?;
    close("aggregated -> pixel-focused", &aa, &pfa_forward(&x, &p.pfa, &g).map_err(e2s)?, 1e-12)
}

fn cpb_suite() -> Outcome {
    let mut r = rng(110);
    let mlp = oracle::random_cpb::<f64>(&mut r, 3);
    let coords = build_relative_coords(9, 6, 3, 2, 7, 7).map_err(e2s)?;
    close("log-CPB table vs pointwise", &log_cpb(&coords, &mlp).map_err(e2s)?, &oracle::pointwise_cpb(&coords, &mlp), 1e-12)
}

fn mhsa_suite() -> Outcome {
    let mut r = rng(111);
    let p = oracle::random_mhsa_params::<f64>(&mut r, 2, 4);
    let x = rand_tensor(&mut r, &[8, 3, 5]);
    close("global attention vs scalar", &mhsa_stage4_forward(&x, &p).map_err(e2s)?, &oracle::scalar_mhsa(&x, &p), 1e-12)
}

fn conv_glu_suite() -> Outcome {
    let mut r = rng(112);
    let x = rand_tensor(&mut r, &[6, 5, 4]);
    for v in GluVariant::ALL {
        let p = oracle::random_conv_glu::<f64>(&mut r, 6, 8, v);
        close(&format!("{v} vs scalar"), &conv_glu_forward(&x, &p).map_err(e2s)?, &oracle::scalar_conv_glu(&x, &p), 1e-12)?;
    }
    for (c, hw, rr, k) in [(64, 14, 4, 3), (32, 56, 8, 3), (8, 7, 2, 5)] {
        let glu = conv_glu_flops(c, hw, hw, rr, k);
        let ffn = conv_ffn_flops(c, hw, hw, rr, k);
        ensure(glu < ffn, || format!("conv_glu_flops {glu} >= conv_ffn_flops {ffn}"))?;
    }
    Ok(())
}

fn tiny_model() -> ModelConfig {
    let a = StageConfig {
        channels: 24,
        blocks: 1,
        mlp_ratio: 2,
        mixer: MixerKind::Aggregated,
        window: Some(3),
        pool_mode: Some(PoolMode::Ratio),
        pool: Some(2),
    };
    let m = StageConfig { channels: 48, blocks: 1, mlp_ratio: 2, mixer: MixerKind::Mhsa, window: None, pool_mode: None, pool: None };
    let mut cfg = ModelConfig::from_stages(vec![a, m]);
    cfg.num_classes = 4;
    cfg.train_resolution = 16;
    cfg
}

fn accountant_suite() -> Outcome {
    let cfg = tiny_model();
    let model = Model::<f32>::new_seeded(&cfg, 0).map_err(e2s)?;
    for mode in [Mode::Normal, Mode::Linear] {
        let img = rand_tensor(&mut rng(113), &[3, 24, 32]).cast::<f32>();
        let (res, macs) = counter::measure(|| model.forward(&img, mode));
        res.map_err(e2s)?;
        let report = count_flops(&cfg, 24, 32, mode).map_err(e2s)?;
        ensure(report.total_macs() == macs, || format!("accountant {} MACs, counter {macs}", report.total_macs()))?;
        ensure(report.total_params() == model.param_count(), || "accountant params differ from the tensor walk".into())?;
    }
    Ok(())
}

fn archive_suite() -> Outcome {
    let cfg = tiny_model();
    let model = Model::<f32>::new_seeded(&cfg, 1).map_err(e2s)?;
    let bytes = model.to_archive().to_bytes().map_err(e2s)?;
    let back = Model::<f32>::from_archive(&cfg, Archive::from_bytes(&bytes).map_err(e2s)?).map_err(e2s)?;
    ensure(back.to_archive().to_bytes().map_err(e2s)? == bytes, || "save -> load -> save is not byte-identical".into())?;
    ensure(Archive::from_bytes(&bytes[..bytes.len() / 2]).is_err(), || "truncated archive was accepted".into())
}

fn mode_suite() -> Outcome {
    let cfg = tiny_model();
    let model = Model::<f32>::new_seeded(&cfg, 2).map_err(e2s)?;
    let img = rand_tensor(&mut rng(114), &[3, 16, 16]).cast::<f32>();
    let a = model.forward(&img, Mode::Normal).map_err(e2s)?;
    let b = model.forward(&img, Mode::Linear).map_err(e2s)?;
    ensure(a == b, || "normal and linear modes differ at the training resolution".into())
}

fn erf_suite() -> Outcome {
    let img = rand_tensor(&mut rng(115), &[TOY_CHANNELS, 5, 5]);
    let g = erf_saliency(|x| ErfToy::Identity.forward(x), &img, ErfOptions::default()).map_err(e2s)?;
    let ok = g.data().iter().enumerate().all(|(p, &v)| if p == 12 { (v - 1.0).abs() < 1e-9 } else { v.abs() < 1e-9 });
    ensure(ok, || "identity-mixer saliency is not a delta at the probe".into())
}

pub const SUITES: &[Suite] = &[
    Suite { name: "matmul", invariant: "GEMM equals the triple-loop product", run: matmul_suite },
    Suite { name: "softmax", invariant: "masked softmax equals direct softmax over unmasked entries", run: softmax_suite },
    Suite { name: "conv", invariant: "im2col and depthwise convolutions equal direct loops", run: conv_suite },
    Suite { name: "activate-pool", invariant: "activate-and-pool equals the composed steps", run: pool_suite },
    Suite { name: "pfa-concat", invariant: "dual-path attention equals the concatenated form", run: pfa_concat_suite },
    Suite { name: "padding-mask", invariant: "masked slots carry zero weight and rows sum to one", run: mask_suite },
    Suite { name: "fused-kernel", invariant: "fused window kernels are bit-identical to unfold", run: kernel_suite },
    Suite { name: "kernel-backward", invariant: "window backward matches finite differences", run: backward_suite },
    Suite { name: "aggregated", invariant: "aggregated attention equals the scalar reference", run: aggregated_suite },
    Suite { name: "degeneracy", invariant: "aggregated attention reduces to pixel-focused attention", run: degeneracy_suite },
    Suite { name: "log-cpb", invariant: "deduplicated bias table equals pointwise MLP", run: cpb_suite },
    Suite { name: "mhsa", invariant: "global attention equals the scalar reference", run: mhsa_suite },
    Suite { name: "conv-glu", invariant: "channel mixer variants equal scalar references", run: conv_glu_suite },
    Suite { name: "accountant", invariant: "closed-form MACs and params equal instrumented counts", run: accountant_suite },
    Suite { name: "archive", invariant: "archive round trip is byte-identical", run: archive_suite },
    Suite { name: "modes", invariant: "normal and linear modes coincide at the training resolution", run: mode_suite },
    Suite { name: "erf", invariant: "identity mixer has a delta receptive field", run: erf_suite },
];

/// First failing suite with its message.
#[derive(Debug)]
pub struct Failure {
    pub suite: &'static Suite,
    pub message: String,
}

/// Runs suites in order, reporting each, and stops at the first failure.
pub fn run(mut report: impl FnMut(&Suite, &Outcome)) -> std::result::Result<usize, Failure> {
    for suite in SUITES {
        let outcome = (suite.run)();
        report(suite, &outcome);
        if let Err(message) = outcome {
            return Err(Failure { suite, message });
        }
    }
    Ok(SUITES.len())
}

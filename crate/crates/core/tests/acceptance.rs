//! End-to-end acceptance checks. Each criterion prints one `[PASS]` or
//! `[FAIL]` line; the test fails if any criterion does.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;
use transnext::attention::{aggregated_attention_forward, build_relative_coords, Similarity, CPB_HIDDEN};
use transnext::backbone::{count_flops, count_params, Archive, MacConvention, Mode, Model, ModelConfig};
use transnext::conv_glu::{conv_ffn_flops, conv_glu_flops, conv_glu_forward, GluVariant};
use transnext::kernel::{
    bench, fused_window_av, fused_window_qk, naive_unfold_av, naive_unfold_qk, BenchCase, BenchShape, DEFAULT_TILE,
};
use transnext::oracle::{self, rand_tensor, rng};
use transnext::pfa::{build_geometry, pfa_attention_weights, pfa_concat_oracle, pfa_forward};
use transnext::tensor::LinearParams;
use transnext::{Error, Tensor};

const VARIANTS: [&str; 4] = ["micro", "tiny", "small", "base"];
/// Published parameter counts (M) and FLOPs (G) at 224².
const PUBLISHED_PARAMS_M: [f64; 4] = [12.8, 28.2, 49.7, 89.7];
const PUBLISHED_FLOPS_G: [f64; 4] = [2.7, 5.7, 10.3, 18.4];

type Check = Result<String, String>;

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value / target - 1.0).abs() <= rel
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Check) -> Check {
    let t0 = Instant::now();
    let detail = f()?;
    let dt = t0.elapsed();
    match limit {
        Some(l) if dt > l => Err(format!("{detail}; took {dt:.2?}, limit {l:?}")),
        _ => Ok(format!("{detail} ({dt:.2?})")),
    }
}

fn image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    rand_tensor(&mut rng(seed), &[3, h, w]).cast()
}

fn c1_param_counts() -> Check {
    timed(Some(Duration::from_secs(10)), || {
        let mut parts = Vec::new();
        for (name, target) in VARIANTS.iter().zip(PUBLISHED_PARAMS_M) {
            let cfg = ModelConfig::stock(name).map_err(|e| e.to_string())?;
            let model = Model::<f32>::new_seeded(&cfg, 0).map_err(|e| e.to_string())?;
            let walked = model.param_count();
            let counted = count_params(&cfg).map_err(|e| e.to_string())?;
            if walked != counted {
                return Err(format!("{name}: tensor walk {walked} != accountant {counted}"));
            }
            let m = walked as f64 / 1e6;
            if !within(m, target, 0.02) {
                return Err(format!("{name}: {m:.3}M vs {target}M"));
            }
            parts.push(format!("{name} {m:.2}M"));
        }
        Ok(parts.join(", "))
    })
}

fn c2_flop_counts() -> Check {
    timed(Some(Duration::from_secs(1)), || {
        let mut parts = Vec::new();
        for (name, target) in VARIANTS.iter().zip(PUBLISHED_FLOPS_G) {
            let cfg = ModelConfig::stock(name).map_err(|e| e.to_string())?;
            let r = count_flops(&cfg, 224, 224, Mode::Normal).map_err(|e| e.to_string())?;
            let g = r.total_flops(MacConvention::Mac1) as f64 / 1e9;
            if !within(g, target, 0.05) {
                return Err(format!("{name}: {g:.3}G (mac1) vs {target}G"));
            }
            parts.push(format!("{name} {g:.2}G"));
        }
        Ok(format!("mac1: {}", parts.join(", ")))
    })
}

fn c3_qe_and_tokens_cost() -> Check {
    let mut cfg = ModelConfig::stock("micro").map_err(|e| e.to_string())?;
    cfg.query_embedding = false;
    cfg.positional_tokens = false;
    let without = Model::<f32>::new_seeded(&cfg, 0).map_err(|e| e.to_string())?.param_count() as f64;
    cfg.query_embedding = true;
    cfg.positional_tokens = true;
    let with = Model::<f32>::new_seeded(&cfg, 0).map_err(|e| e.to_string())?.param_count() as f64;
    let delta = with / without - 1.0;
    let detail = format!("{:.3}M -> {:.3}M, +{:.3}%", without / 1e6, with / 1e6, 100.0 * delta);
    if delta > 0.0 && delta <= 0.0035 && within(without / 1e6, 12.78, 0.02) && within(with / 1e6, 12.81, 0.02) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c4_dual_path_equivalence() -> Check {
    timed(Some(Duration::from_secs(30)), || {
        let mut r = rng(4);
        let mut worst = 0f64;
        let mut cases = 0;
        for i in 0..60 {
            let (h, w) = if i % 3 == 0 { (5, 7) } else { (r.random_range(1..=9), r.random_range(1..=9)) };
            let k = [1, 3, 5, 7][r.random_range(0..4)];
            let ph = r.random_range(1..=h);
            let pw = r.random_range(1..=w);
            let heads = r.random_range(1..=3);
            let d = r.random_range(1..=4);
            let g = build_geometry(h, w, k, ph, pw).map_err(|e| e.to_string())?;
            let p = oracle::random_pfa_params::<f64>(&mut r, heads, d, k);
            let x = rand_tensor(&mut r, &[heads * d, h, w]);
            let dual = pfa_forward(&x, &p, &g).map_err(|e| e.to_string())?;
            let concat = pfa_concat_oracle(&x, &p, &g).map_err(|e| e.to_string())?;
            worst = worst.max(dual.max_abs_diff(&concat).map_err(|e| e.to_string())?);
            cases += 1;
        }
        if worst <= 1e-12 {
            Ok(format!("{cases} geometries, max diff {worst:.1e}"))
        } else {
            Err(format!("max diff {worst:.3e}"))
        }
    })
}

fn c5_fused_kernel() -> Check {
    timed(Some(Duration::from_secs(60)), || {
        let mut r = rng(5);
        for (h, w, k) in [(8, 8, 3), (5, 7, 3), (9, 4, 5), (13, 11, 7), (1, 6, 3)] {
            let g = build_geometry(h, w, k, 1, 1).map_err(|e| e.to_string())?;
            let q = rand_tensor(&mut r, &[2, h, w, 6]);
            let kk = rand_tensor(&mut r, &[2, h, w, 6]);
            let a = rand_tensor(&mut r, &[2, h, w, k * k]);
            let f64_ok = fused_window_qk(&q, &kk, &g).unwrap() == naive_unfold_qk(&q, &kk, &g).unwrap()
                && fused_window_av(&a, &kk, &g).unwrap() == naive_unfold_av(&a, &kk, &g).unwrap();
            let (q, kk, a) = (q.cast::<f32>(), kk.cast::<f32>(), a.cast::<f32>());
            let f32_ok = fused_window_qk(&q, &kk, &g).unwrap() == naive_unfold_qk(&q, &kk, &g).unwrap()
                && fused_window_av(&a, &kk, &g).unwrap() == naive_unfold_av(&a, &kk, &g).unwrap();
            if !(f64_ok && f32_ok) {
                return Err(format!("fused != naive at {h}x{w} k={k}"));
            }
        }
        let g = build_geometry(4, 4, 3, 1, 1).map_err(|e| e.to_string())?;
        let worst = (0..5).map(|_| oracle::window_backward_fd_error(&mut r, &g, 1, 3)).fold(0.0, f64::max);
        if worst <= 1e-6 {
            Ok(format!("bit-identical forward, backward rel err {worst:.1e}"))
        } else {
            Err(format!("backward rel err {worst:.3e}"))
        }
    })
}

fn c6_padding_mask() -> Check {
    let mut r = rng(6);
    let g = build_geometry(6, 6, 3, 2, 2).map_err(|e| e.to_string())?;
    let p = oracle::random_pfa_params::<f64>(&mut r, 2, 4, 3);
    let x = rand_tensor(&mut r, &[8, 6, 6]).scale(4.0);
    let wts = pfa_attention_weights(&x, &p, &g).map_err(|e| e.to_string())?;
    let cols = 9 + 4;
    let mut masked = 0;
    let mut worst = 0f64;
    for (row_i, row) in wts.data().chunks(cols).enumerate() {
        let pix = row_i % 36;
        for s in 0..9 {
            if g.mask().data()[pix * 9 + s] {
                masked += 1;
                if row[s] != 0.0 {
                    return Err(format!("pixel {pix} slot {s} has weight {}", row[s]));
                }
            }
        }
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    if worst <= 1e-6 && masked == 2 * (16 * 3 + 4 * 5) {
        Ok(format!("{masked} masked slots exactly zero, max |sum-1| {worst:.1e}"))
    } else {
        Err(format!("{masked} masked slots, max |sum-1| {worst:.3e}"))
    }
}

fn c7_linear_scaling() -> Check {
    let cfg = ModelConfig::stock("micro").map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for conv in [MacConvention::Mac1, MacConvention::Mac2] {
        let a = count_flops(&cfg, 224, 224, Mode::Linear).map_err(|e| e.to_string())?.total_flops(conv);
        let b = count_flops(&cfg, 448, 448, Mode::Linear).map_err(|e| e.to_string())?.total_flops(conv);
        let ratio = b as f64 / a as f64;
        if !(3.9..=4.1).contains(&ratio) {
            return Err(format!("{conv}: ratio {ratio:.4}"));
        }
        parts.push(format!("{conv} {ratio:.3}"));
    }
    Ok(parts.join(", "))
}

fn c8_mode_coincidence(micro: &Model<f32>) -> Check {
    let img = image(8, 224, 224);
    let n = micro.forward(&img, Mode::Normal).map_err(|e| e.to_string())?;
    let l = micro.forward(&img, Mode::Linear).map_err(|e| e.to_string())?;
    if n != l {
        return Err("224²: normal and linear logits differ".into());
    }
    let img = image(9, 320, 320);
    let n = micro.forward(&img, Mode::Normal).map_err(|e| e.to_string())?;
    let l = micro.forward(&img, Mode::Linear).map_err(|e| e.to_string())?;
    let diff = n.max_abs_diff(&l).map_err(|e| e.to_string())?;
    if n.all_finite() && l.all_finite() && diff > 0.0 {
        Ok(format!("224² bit-identical; 320² max diff {diff:.2e}"))
    } else {
        Err(format!("320²: finite {} / {}, diff {diff}", n.all_finite(), l.all_finite()))
    }
}

fn c9_multi_scale(micro: &Model<f32>) -> Check {
    let mut done = 0;
    for s in [224, 256, 320, 384, 512, 640] {
        let img = image(s as u64, s, s);
        for mode in [Mode::Normal, Mode::Linear] {
            let y = micro.forward(&img, mode).map_err(|e| format!("{s}² {mode}: {e}"))?;
            if y.dims() != [1000] || !y.all_finite() {
                return Err(format!("{s}² {mode}: non-finite or misshapen logits"));
            }
            done += 1;
        }
    }
    Ok(format!("{done} forwards finite"))
}

fn c10_conv_glu() -> Check {
    let mut grid = 0;
    for c in [8u64, 24, 64, 96, 384] {
        for hw in [1u64, 7, 14, 56] {
            for r in [1u64, 2, 4, 8] {
                for k in [2u64, 3, 5, 7] {
                    let glu = conv_glu_flops(c, hw, hw, r, k);
                    let ffn = conv_ffn_flops(c, hw, hw, r, k);
                    if glu >= ffn {
                        return Err(format!("C={c} H=W={hw} R={r} k={k}: {glu} >= {ffn}"));
                    }
                    grid += 1;
                }
            }
        }
    }
    let mut rr = rng(10);
    let mut worst = 0f64;
    for v in GluVariant::ALL {
        for (c, h, w, hid) in [(6, 5, 4, 8), (4, 1, 7, 3), (8, 6, 6, 16)] {
            let p = oracle::random_conv_glu::<f64>(&mut rr, c, hid, v);
            let x = rand_tensor(&mut rr, &[c, h, w]);
            let got = conv_glu_forward(&x, &p).map_err(|e| e.to_string())?;
            worst = worst.max(got.max_abs_diff(&oracle::scalar_conv_glu(&x, &p)).map_err(|e| e.to_string())?);
        }
    }
    if worst <= 1e-12 {
        Ok(format!("{grid} grid points strict, variant max diff {worst:.1e}"))
    } else {
        Err(format!("variant max diff {worst:.3e}"))
    }
}

fn c11_degeneracy() -> Check {
    let mut r = rng(11);
    let mut worst = 0f64;
    for (h, w, ph, pw, heads, d) in [(5, 7, 2, 3, 2, 3), (6, 6, 1, 1, 1, 4), (3, 8, 3, 2, 3, 2)] {
        let g = build_geometry(h, w, 3, ph, pw).map_err(|e| e.to_string())?;
        let coords = build_relative_coords(h, w, ph, pw, h, w).map_err(|e| e.to_string())?;
        let mut p = oracle::random_agg_params::<f64>(&mut r, heads, d, 3);
        p.qe = Some(Tensor::zeros(&[heads, d]).unwrap());
        p.pos_tokens = Some(Tensor::zeros(&[heads, d, 9]).unwrap());
        p.cpb.fc2 = LinearParams::new(Tensor::zeros(&[heads, CPB_HIDDEN]).unwrap(), Some(Tensor::zeros(&[heads]).unwrap()))
            .unwrap();
        p.similarity = Similarity::ScaledDot;
        let x = rand_tensor(&mut r, &[heads * d, h, w]);
        let aa = aggregated_attention_forward(&x, &p, &g, &coords).map_err(|e| e.to_string())?;
        let pfa = pfa_forward(&x, &p.pfa, &g).map_err(|e| e.to_string())?;
        worst = worst.max(aa.max_abs_diff(&pfa).map_err(|e| e.to_string())?);
    }
    if worst <= 1e-12 {
        Ok(format!("max diff {worst:.1e}"))
    } else {
        Err(format!("max diff {worst:.3e}"))
    }
}

fn named(e: Result<Archive, Error>) -> Option<String> {
    match e {
        Err(Error::ArchiveTensor { name, .. }) => Some(name),
        _ => None,
    }
}

fn c12_serialization(micro: &Model<f32>) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.tnxt"), dir.path().join("b.tnxt"));
    let cfg = micro.config().clone();
    micro.save(&a).map_err(|e| e.to_string())?;
    Model::<f32>::load(&cfg, &a).map_err(|e| e.to_string())?.save(&b).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&a).map_err(|e| e.to_string())?;
    if bytes != std::fs::read(&b).map_err(|e| e.to_string())? {
        return Err("save -> load -> save differs".into());
    }
    // The last tensor in name order is the last in the file.
    let last = Archive::from_bytes(&bytes).unwrap().names().last().unwrap().to_string();
    if named(Archive::from_bytes(&bytes[..bytes.len() - 1])).as_deref() != Some(last.as_str()) {
        return Err("truncated archive not rejected with the tensor name".into());
    }
    let mut bad_magic = bytes.clone();
    bad_magic[..4].copy_from_slice(b"NOPE");
    if !matches!(Archive::from_bytes(&bad_magic), Err(Error::Archive(_))) {
        return Err("bad magic accepted".into());
    }
    let first = Archive::from_bytes(&bytes).unwrap().names().next().unwrap().to_string();
    let mut bad_dtype = bytes.clone();
    bad_dtype[14 + first.len()] = 7;
    if named(Archive::from_bytes(&bad_dtype)).as_deref() != Some(first.as_str()) {
        return Err("bad dtype code not rejected with the tensor name".into());
    }
    let tiny = ModelConfig::stock("tiny").unwrap();
    match Model::<f32>::load(&tiny, &a) {
        Err(Error::ArchiveTensor { name, reason }) => Ok(format!("byte-identical; mismatched config rejected at `{name}`: {reason}")),
        other => Err(format!("loading into a mismatched config gave {:?}", other.map(|_| ()))),
    }
}

fn c13_scratch_contract() -> Check {
    let mut fused = Vec::new();
    let mut naive = Vec::new();
    for h in [8, 16, 32, 64] {
        let shape = BenchShape { h, w: h, c: 24, heads: 2, k: 3 };
        fused.push(bench(BenchCase::Fused, shape, 1, DEFAULT_TILE).map_err(|e| e.to_string())?.peak_scratch_bytes);
        naive.push(bench(BenchCase::Naive, shape, 1, DEFAULT_TILE).map_err(|e| e.to_string())?.peak_scratch_bytes);
    }
    let constant = fused.iter().all(|&b| b == fused[0]);
    let proportional = naive.windows(2).all(|p| p[1] == 4 * p[0]);
    if constant && proportional {
        Ok(format!("fused {fused:?} B, naive {naive:?} B"))
    } else {
        Err(format!("fused {fused:?}, naive {naive:?}"))
    }
}

fn run(id: usize, title: &str, f: impl FnOnce() -> Check) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let line = match &outcome {
        Ok(d) => format!("[PASS] {id:>2} {title}: {d}\n"),
        Err(d) => format!("[FAIL] {id:>2} {title}: {d}\n"),
    };
    // Straight to the stream so the lines survive output capture.
    let _ = std::io::stdout().write_all(line.as_bytes());
    outcome.is_ok()
}

#[test]
fn acceptance() {
    let micro = Model::<f32>::new_seeded(&ModelConfig::stock("micro").unwrap(), 0).unwrap();
    let results = [
        run(1, "parameter counts", c1_param_counts),
        run(2, "FLOP counts at 224²", c2_flop_counts),
        run(3, "query embedding and positional token cost", c3_qe_and_tokens_cost),
        run(4, "dual-path equals concatenated attention", c4_dual_path_equivalence),
        run(5, "fused kernel forward and backward", c5_fused_kernel),
        run(6, "padding mask", c6_padding_mask),
        run(7, "linear-mode scaling", c7_linear_scaling),
        run(8, "mode coincidence", || c8_mode_coincidence(&micro)),
        run(9, "multi-scale forward", || c9_multi_scale(&micro)),
        run(10, "ConvGLU cost and variants", c10_conv_glu),
        run(11, "aggregated to pixel-focused degeneracy", c11_degeneracy),
        run(12, "archive round trip and diagnostics", || c12_serialization(&micro)),
        run(13, "fused scratch contract", c13_scratch_contract),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}

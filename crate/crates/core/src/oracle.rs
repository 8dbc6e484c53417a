//! Slow, loop-level reference implementations and random fixtures.
//!
//! Nothing here shares code with the optimized paths beyond the parameter
//! structs: matrix products, pooling, normalization, softmax and attention
//! are all rewritten as plain loops over `f64`. The self-test and the test
//! suites compare the library against these.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AggAttentionParams, CpbMlp, MhsaParams, RelativeCoords, Similarity, CPB_HIDDEN};
use crate::conv_glu::{ConvGluParams, GluVariant};
use crate::kernel::{fused_window_av, fused_window_backward, fused_window_qk};
use crate::pfa::{PfaParams, WindowGeometry};
use crate::tensor::{LayerNormParams, LinearParams, Scalar, Tensor, LAYERNORM_EPS};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-1, 1)`.
pub fn rand_tensor(rng: &mut impl Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).expect("positive extents")
}

pub fn random_linear(rng: &mut impl Rng, out: usize, inp: usize) -> LinearParams<f64> {
    let scale = 1.0 / (inp as f64).sqrt();
    LinearParams::new(rand_tensor(rng, &[out, inp]).scale(scale), Some(rand_tensor(rng, &[out]).scale(0.1)))
        .expect("consistent extents")
}

pub fn random_layernorm(rng: &mut impl Rng, c: usize) -> LayerNormParams<f64> {
    LayerNormParams {
        gamma: rand_tensor(rng, &[c]).map(|v| 1.0 + 0.25 * v),
        beta: rand_tensor(rng, &[c]).scale(0.1),
    }
}

pub fn random_pfa_params<T: Scalar>(rng: &mut impl Rng, heads: usize, head_dim: usize, k: usize) -> PfaParams<T> {
    let c = heads * head_dim;
    PfaParams {
        q_proj: random_linear(rng, c, c),
        k_proj: random_linear(rng, c, c),
        v_proj: random_linear(rng, c, c),
        pool_proj: random_linear(rng, c, c),
        pool_norm: random_layernorm(rng, c),
        window_bias: rand_tensor(rng, &[heads, k * k]).scale(0.5),
        heads,
        head_dim,
    }
    .cast()
}

pub fn random_cpb<T: Scalar>(rng: &mut impl Rng, heads: usize) -> CpbMlp<T> {
    CpbMlp { fc1: random_linear(rng, CPB_HIDDEN, 2), fc2: random_linear(rng, heads, CPB_HIDDEN) }.cast()
}

pub fn random_agg_params<T: Scalar>(rng: &mut impl Rng, heads: usize, head_dim: usize, k: usize) -> AggAttentionParams<T> {
    let pfa = random_pfa_params::<f64>(rng, heads, head_dim, k);
    AggAttentionParams {
        pfa,
        qe: Some(rand_tensor(rng, &[heads, head_dim]).scale(0.5)),
        pos_tokens: Some(rand_tensor(rng, &[heads, head_dim, k * k]).scale(0.2)),
        tau_raw: rand_tensor(rng, &[heads]),
        cpb: random_cpb(rng, heads),
        similarity: Similarity::LengthScaledCosine,
    }
    .cast()
}

pub fn random_mhsa_params<T: Scalar>(rng: &mut impl Rng, heads: usize, head_dim: usize) -> MhsaParams<T> {
    let c = heads * head_dim;
    MhsaParams {
        q_proj: random_linear(rng, c, c),
        k_proj: random_linear(rng, c, c),
        v_proj: random_linear(rng, c, c),
        qe: Some(rand_tensor(rng, &[heads, head_dim]).scale(0.5)),
        tau_raw: rand_tensor(rng, &[heads]),
        heads,
        head_dim,
    }
    .cast()
}

pub fn random_conv_glu<T: Scalar>(rng: &mut impl Rng, c: usize, hidden: usize, variant: GluVariant) -> ConvGluParams<T> {
    ConvGluParams {
        fc_value: random_linear(rng, hidden, c),
        fc_gate: random_linear(rng, hidden, c),
        dw_weight: rand_tensor(rng, &[hidden, 3, 3]).scale(0.5),
        dw_bias: rand_tensor(rng, &[hidden]).scale(0.1),
        fc_out: random_linear(rng, c, hidden),
        variant,
    }
    .cast()
}

pub fn matmul_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.data()[i * k + t] * b.data()[t * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("extents")
}

pub fn softmax_direct(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn depthwise_conv_naive(x: &Tensor<f64>, f: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = b.data()[ch];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (y, xx) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                        if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                            acc += f.data()[ch * 9 + ky * 3 + kx] * x.data()[(ch * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(ch * h + i) * w + j] = acc;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("extents")
}

pub fn conv2d_naive(x: &Tensor<f64>, f: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (cin, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (cout, k) = (f.dims()[0], f.dims()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.map_or(0.0, |b| b.data()[co]);
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                                acc += f.data()[((co * cin + ci) * k + ky) * k + kx]
                                    * x.data()[(ci * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![cout, ho, wo], out).expect("extents")
}

fn lin(x: &[f64], p: &LinearParams<f64>) -> Vec<f64> {
    let (out, inp) = (p.out_features(), p.in_features());
    (0..out)
        .map(|o| {
            let mut acc = 0.0;
            for i in 0..inp {
                acc += p.weight.data()[o * inp + i] * x[i];
            }
            acc + p.bias.as_ref().map_or(0.0, |b| b.data()[o])
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layernorm(x: &[f64], p: &LayerNormParams<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LAYERNORM_EPS).sqrt() * p.gamma.data()[i] + p.beta.data()[i])
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// Softmax over the entries marked live; dead entries get weight 0.
fn masked_softmax(logits: &[f64], live: &[bool]) -> Vec<f64> {
    let m = logits.iter().zip(live).filter(|(_, &l)| l).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().zip(live).map(|(&v, &l)| if l { (v - m).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn tokens_of(x: &Tensor<f64>) -> (usize, usize, usize, Vec<Vec<f64>>) {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let n = h * w;
    let toks = (0..n).map(|p| (0..c).map(|ch| x.data()[ch * n + p]).collect()).collect();
    (c, h, w, toks)
}

fn to_chw(toks: &[Vec<f64>], h: usize, w: usize) -> Tensor<f64> {
    let c = toks[0].len();
    let n = h * w;
    Tensor::from_fn(&[c, h, w], |i| toks[i % n][i / n]).expect("extents")
}

fn pooled_tokens(
    toks: &[Vec<f64>],
    h: usize,
    w: usize,
    proj: &LinearParams<f64>,
    norm: &LayerNormParams<f64>,
    ph: usize,
    pw: usize,
) -> Vec<Vec<f64>> {
    let act: Vec<Vec<f64>> = toks.iter().map(|t| lin(t, proj).into_iter().map(gelu).collect()).collect();
    let c = act[0].len();
    let mut out = Vec::new();
    for a in 0..ph {
        let (r0, r1) = ((a * h) / ph, ((a + 1) * h).div_ceil(ph));
        for b in 0..pw {
            let (c0, c1) = ((b * w) / pw, ((b + 1) * w).div_ceil(pw));
            let mut mean = vec![0.0; c];
            for r in r0..r1 {
                for col in c0..c1 {
                    for ch in 0..c {
                        mean[ch] += act[r * w + col][ch];
                    }
                }
            }
            let cnt = ((r1 - r0) * (c1 - c0)) as f64;
            mean.iter_mut().for_each(|v| *v /= cnt);
            out.push(layernorm(&mean, norm));
        }
    }
    out
}

/// Step-by-step Linear, GELU, pooling and LayerNorm on a `[C, H, W]` map.
pub fn activate_and_pool_composed(
    x: &Tensor<f64>,
    proj: &LinearParams<f64>,
    norm: &LayerNormParams<f64>,
    ph: usize,
    pw: usize,
) -> Tensor<f64> {
    let (_, h, w, toks) = tokens_of(x);
    to_chw(&pooled_tokens(&toks, h, w, proj, norm, ph, pw), ph, pw)
}

fn window_neighbor(p: usize, s: usize, h: usize, w: usize, k: usize) -> Option<usize> {
    let r = (k / 2) as isize;
    let y = (p / w) as isize + (s / k) as isize - r;
    let x = (p % w) as isize + (s % k) as isize - r;
    (y >= 0 && y < h as isize && x >= 0 && x < w as isize).then(|| y as usize * w + x as usize)
}

struct ScalarAttention<'a> {
    h: usize,
    w: usize,
    k: usize,
    heads: usize,
    d: usize,
    q: Vec<Vec<f64>>,
    kk: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    kp: Vec<Vec<f64>>,
    vp: Vec<Vec<f64>>,
    window_bias: &'a Tensor<f64>,
}

impl ScalarAttention<'_> {
    fn head(&self, t: &[f64], hd: usize) -> Vec<f64> {
        t[hd * self.d..(hd + 1) * self.d].to_vec()
    }

    /// `logit(hd, p, q_head, k_head, slot or pooled index)` decides logits;
    /// `extra(hd, p, s)` is added to live window weights after the softmax.
    fn run(
        &self,
        logit: impl Fn(usize, usize, &[f64], &[f64], Option<usize>, usize) -> f64,
        extra: impl Fn(usize, usize, usize) -> f64,
    ) -> Tensor<f64> {
        let (n, slots, l) = (self.h * self.w, self.k * self.k, self.kp.len());
        let mut out = vec![vec![0.0; self.heads * self.d]; n];
        for hd in 0..self.heads {
            for p in 0..n {
                let q = self.head(&self.q[p], hd);
                let mut logits = Vec::new();
                let mut live = Vec::new();
                let mut vals = Vec::new();
                for s in 0..slots {
                    match window_neighbor(p, s, self.h, self.w, self.k) {
                        Some(nb) => {
                            let kv = self.head(&self.kk[nb], hd);
                            logits.push(logit(hd, p, &q, &kv, Some(s), 0) + self.window_bias.data()[hd * slots + s]);
                            live.push(true);
                            vals.push(self.head(&self.v[nb], hd));
                        }
                        None => {
                            logits.push(0.0);
                            live.push(false);
                            vals.push(vec![0.0; self.d]);
                        }
                    }
                }
                for a in 0..l {
                    let kv = self.head(&self.kp[a], hd);
                    logits.push(logit(hd, p, &q, &kv, None, a));
                    live.push(true);
                    vals.push(self.head(&self.vp[a], hd));
                }
                let mut wts = masked_softmax(&logits, &live);
                for s in 0..slots {
                    if live[s] {
                        wts[s] += extra(hd, p, s);
                    }
                }
                for (wt, val) in wts.iter().zip(&vals) {
                    for c in 0..self.d {
                        out[p][hd * self.d + c] += wt * val[c];
                    }
                }
            }
        }
        to_chw(&out, self.h, self.w)
    }
}

fn scalar_setup<'a>(x: &Tensor<f64>, p: &'a PfaParams<f64>, g: &WindowGeometry) -> ScalarAttention<'a> {
    let (_, h, w, toks) = tokens_of(x);
    let pooled = pooled_tokens(&toks, h, w, &p.pool_proj, &p.pool_norm, g.pool_h, g.pool_w);
    ScalarAttention {
        h,
        w,
        k: g.k,
        heads: p.heads,
        d: p.head_dim,
        q: toks.iter().map(|t| lin(t, &p.q_proj)).collect(),
        kk: toks.iter().map(|t| lin(t, &p.k_proj)).collect(),
        v: toks.iter().map(|t| lin(t, &p.v_proj)).collect(),
        kp: pooled.iter().map(|t| lin(t, &p.k_proj)).collect(),
        vp: pooled.iter().map(|t| lin(t, &p.v_proj)).collect(),
        window_bias: &p.window_bias,
    }
}

/// Pixel-focused attention written as loops from the raw parameters.
pub fn scalar_pfa(x: &Tensor<f64>, p: &PfaParams<f64>, g: &WindowGeometry) -> Tensor<f64> {
    let sa = scalar_setup(x, p, g);
    let scale = 1.0 / (p.head_dim as f64).sqrt();
    sa.run(|_, _, q, k, _, _| dot(q, k) * scale, |_, _, _| 0.0)
}

fn cpb_point(mlp: &CpbMlp<f64>, dy: f64, dx: f64) -> Vec<f64> {
    let hidden: Vec<f64> = lin(&[dy, dx], &mlp.fc1).into_iter().map(|v| v.max(0.0)).collect();
    lin(&hidden, &mlp.fc2)
}

/// Position bias `[heads, H·W, L]` from the MLP evaluated at every pair.
pub fn pointwise_cpb(coords: &RelativeCoords, mlp: &CpbMlp<f64>) -> Tensor<f64> {
    let delta = coords.delta();
    let (n, l) = (delta.dims()[0], delta.dims()[1]);
    let heads = mlp.heads();
    let mut out = vec![0.0; heads * n * l];
    for pair in 0..n * l {
        let b = cpb_point(mlp, delta.data()[pair * 2], delta.data()[pair * 2 + 1]);
        for h in 0..heads {
            out[h * n * l + pair] = b[h];
        }
    }
    Tensor::new(vec![heads, n, l], out).expect("extents")
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Aggregated attention written as loops from the raw parameters.
pub fn scalar_aggregated(
    x: &Tensor<f64>,
    p: &AggAttentionParams<f64>,
    g: &WindowGeometry,
    coords: &RelativeCoords,
) -> Tensor<f64> {
    let sa = scalar_setup(x, &p.pfa, g);
    let bias = pointwise_cpb(coords, &p.cpb);
    let (n, l, slots, d) = (g.h * g.w, g.pool_h * g.pool_w, g.k * g.k, p.pfa.head_dim);
    let cosine = p.similarity == Similarity::LengthScaledCosine;
    let norm_q = |q: &[f64]| if cosine { unit(q) } else { q.to_vec() };
    let logit = |hd: usize, px: usize, q: &[f64], k: &[f64], slot: Option<usize>, a: usize| {
        let mut qs = norm_q(q);
        if let Some(qe) = &p.qe {
            for c in 0..d {
                qs[c] += qe.data()[hd * d + c];
            }
        }
        let scale = if cosine {
            let live = (0..slots).filter(|&s| window_neighbor(px, s, g.h, g.w, g.k).is_some()).count() + l;
            softplus(p.tau_raw.data()[hd]) * (live as f64).ln()
        } else {
            1.0 / (d as f64).sqrt()
        };
        let kn = if cosine { unit(k) } else { k.to_vec() };
        let b = if slot.is_none() { bias.data()[(hd * n + px) * l + a] } else { 0.0 };
        scale * dot(&qs, &kn) + b
    };
    let extra = |hd: usize, px: usize, s: usize| match &p.pos_tokens {
        Some(t) => {
            let qn = norm_q(&sa.head(&sa.q[px], hd));
            (0..d).map(|c| qn[c] * t.data()[(hd * d + c) * slots + s]).sum()
        }
        None => 0.0,
    };
    sa.run(logit, extra)
}

/// Global cosine attention with query embedding, as loops.
pub fn scalar_mhsa(x: &Tensor<f64>, p: &MhsaParams<f64>) -> Tensor<f64> {
    let (_, h, w, toks) = tokens_of(x);
    let n = h * w;
    let d = p.head_dim;
    let q: Vec<Vec<f64>> = toks.iter().map(|t| lin(t, &p.q_proj)).collect();
    let k: Vec<Vec<f64>> = toks.iter().map(|t| lin(t, &p.k_proj)).collect();
    let v: Vec<Vec<f64>> = toks.iter().map(|t| lin(t, &p.v_proj)).collect();
    let mut out = vec![vec![0.0; p.heads * d]; n];
    for hd in 0..p.heads {
        let scale = softplus(p.tau_raw.data()[hd]) * (n as f64).ln();
        for i in 0..n {
            let mut qi = unit(&q[i][hd * d..(hd + 1) * d]);
            if let Some(qe) = &p.qe {
                for c in 0..d {
                    qi[c] += qe.data()[hd * d + c];
                }
            }
            let logits: Vec<f64> = (0..n).map(|j| scale * dot(&qi, &unit(&k[j][hd * d..(hd + 1) * d]))).collect();
            let wts = masked_softmax(&logits, &vec![true; n]);
            for j in 0..n {
                for c in 0..d {
                    out[i][hd * d + c] += wts[j] * v[j][hd * d + c];
                }
            }
        }
    }
    to_chw(&out, h, w)
}

/// Channel mixer of any variant, as loops.
pub fn scalar_conv_glu(x: &Tensor<f64>, p: &ConvGluParams<f64>) -> Tensor<f64> {
    let (_, h, w, toks) = tokens_of(x);
    let n = h * w;
    let hid = p.fc_value.out_features();
    let value: Vec<Vec<f64>> = toks.iter().map(|t| lin(t, &p.fc_value)).collect();
    let gate: Vec<Vec<f64>> = toks.iter().map(|t| lin(t, &p.fc_gate)).collect();
    let dw = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|px| {
                (0..hid)
                    .map(|ch| {
                        let mut acc = p.dw_bias.data()[ch];
                        for s in 0..9 {
                            if let Some(nb) = window_neighbor(px, s, h, w, 3) {
                                acc += p.dw_weight.data()[ch * 9 + s] * m[nb][ch];
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    };
    let map = |m: &[Vec<f64>], f: &dyn Fn(f64) -> f64| -> Vec<Vec<f64>> {
        m.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
    };
    let mul = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).collect()).collect()
    };
    let mixed = match p.variant {
        GluVariant::ConvGlu => mul(&value, &map(&dw(&gate), &gelu)),
        GluVariant::Type1 => mul(&value, &dw(&map(&gate, &gelu))),
        GluVariant::Type2 => mul(&dw(&value), &map(&gate, &gelu)),
        GluVariant::Type3 => dw(&mul(&value, &map(&gate, &gelu))),
    };
    let out: Vec<Vec<f64>> = mixed.iter().map(|t| lin(t, &p.fc_out)).collect();
    to_chw(&out, h, w)
}

/// Worst relative error between the analytic window-kernel gradients and
/// central differences (`h = 1e-4`) of
/// `L = Σ g_logits·qk(q, k) + Σ g_out·av(attn, v)` over live slots.
pub fn window_backward_fd_error(rng: &mut impl Rng, g: &WindowGeometry, heads: usize, d: usize) -> f64 {
    let dims = [heads, g.h, g.w, d];
    let adims = [heads, g.h, g.w, g.slots()];
    let inputs = [
        rand_tensor(rng, &dims),
        rand_tensor(rng, &dims),
        rand_tensor(rng, &dims),
        rand_tensor(rng, &adims),
    ];
    let gl = rand_tensor(rng, &adims);
    let go = rand_tensor(rng, &dims);
    let loss = |t: &[Tensor<f64>; 4]| -> f64 {
        let logits = fused_window_qk(&t[0], &t[1], g).expect("shapes");
        let out = fused_window_av(&t[3], &t[2], g).expect("shapes");
        let mut l = 0.0;
        for (i, (&a, &b)) in logits.data().iter().zip(gl.data()).enumerate() {
            if !g.mask().data()[i % (g.pixels() * g.slots())] {
                l += a * b;
            }
        }
        l + dot(out.data(), go.data())
    };
    let grads = fused_window_backward(&gl, &go, &inputs[0], &inputs[1], &inputs[2], &inputs[3], g).expect("shapes");
    let analytic = [&grads.dq, &grads.dk, &grads.dv, &grads.dattn];
    let step = 1e-4;
    let mut worst = 0.0f64;
    for which in 0..4 {
        for i in 0..inputs[which].len() {
            let v = inputs[which].data()[i];
            let mut plus = inputs.clone();
            plus[which] = inputs[which].with_value(&unravel(inputs[which].dims(), i), v + step).expect("index");
            let mut minus = inputs.clone();
            minus[which] = inputs[which].with_value(&unravel(inputs[which].dims(), i), v - step).expect("index");
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let a = analytic[which].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

pub(crate) fn unravel(dims: &[usize], mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for (i, &d) in dims.iter().enumerate().rev() {
        idx[i] = flat % d;
        flat /= d;
    }
    idx
}

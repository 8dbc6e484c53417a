//! Aggregated attention and the global attention used in the last stage.
//!
//! Aggregated attention extends [`crate::pfa`] with a learnable query
//! embedding added to every normalized query, learnable positional tokens
//! whose product with the query is added to the window weights, cosine
//! similarity scaled by `softplus(τ)·ln N` where `N` counts the unmasked keys,
//! and a pooled-path bias produced by a small MLP over log-spaced relative
//! coordinates.

use crate::error::{shape_err, Error, Result};
use crate::pfa::{concat_weights, merge_heads, project, split_heads, DualPath, PfaParams, WindowGeometry};
use crate::tensor::{gemm, softmax_row, tokens_to_chw, transpose2d, IntoTensor, LinearParams, Scalar, Tensor};

/// Width of the hidden layer of the position-bias MLP.
pub const CPB_HIDDEN: usize = 512;

const NORM_EPS: f64 = 1e-12;

/// How raw query/key similarities become logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Similarity {
    /// ℓ2-normalized query and key, scaled by `softplus(τ)·ln(n_eff)`.
    #[default]
    LengthScaledCosine,
    /// Plain dot product scaled by `1/√d`, as in pixel-focused attention.
    ScaledDot,
}

pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive targets.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `τ·ln(n_eff)`.
pub fn length_scale<T: Scalar>(tau: T, n_eff: usize) -> Result<T> {
    if n_eff == 0 {
        return Err(Error::Domain("length scale needs at least one key".into()));
    }
    if !(tau > T::zero()) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    Ok(tau * T::from_f64(n_eff as f64).ln())
}

/// Scales every vector along the last axis to unit ℓ2 norm.
pub fn cosine_normalize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.dims().last().expect("tensors have rank >= 1");
    let eps = T::from_f64(NORM_EPS);
    let mut data = x.data().to_vec();
    for row in data.chunks_exact_mut(d) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        for v in row {
            *v = *v / norm;
        }
    }
    data.into_tensor(x.dims())
}

/// Two-layer ReLU MLP from a 2-D relative coordinate to one bias per head.
#[derive(Clone, Debug, PartialEq)]
pub struct CpbMlp<T> {
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
}

impl<T: Scalar> CpbMlp<T> {
    pub fn cast<U: Scalar>(&self) -> CpbMlp<U> {
        CpbMlp { fc1: self.fc1.cast(), fc2: self.fc2.cast() }
    }

    pub fn heads(&self) -> usize {
        self.fc2.out_features()
    }

    /// `[U, 2]` coordinates to `[U, heads]` biases.
    pub fn forward(&self, coords: &Tensor<T>) -> Result<Tensor<T>> {
        let hidden = self.fc1.forward(coords)?.map(|&v| v.max(T::zero()));
        self.fc2.forward(&hidden)
    }
}

/// Offsets from every query pixel to every pooled key, log-spaced.
///
/// Pooled keys sit at the centre of their adaptive-pool bucket. Offsets are
/// measured in pixels of the current map, rescaled so the training-size map
/// spans `[−8, 8]`, then mapped through `sign(Δ)·log2(1+|Δ|)/log2(8)`. The two
/// axes are independent, so distinct offsets form a `U_h × U_w` grid that is
/// stored once and indexed per (query, key) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeCoords {
    pub h: usize,
    pub w: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    table: Tensor<f64>,
    index: Vec<usize>,
}

fn log_spaced(delta: f64) -> f64 {
    delta.signum() * (1.0 + delta.abs()).log2() / 8f64.log2()
}

/// Distinct offsets along one axis, sorted, and the index of each
/// (query, key) offset in that list.
fn axis_offsets(n: usize, pooled: usize, train: usize) -> (Vec<f64>, Vec<usize>) {
    let norm = 8.0 / (train.max(2) - 1) as f64;
    let centers: Vec<f64> = (0..pooled)
        .map(|a| {
            let (s, e) = crate::tensor::pool_bucket(a, n, pooled);
            (s + e - 1) as f64 / 2.0
        })
        .collect();
    let raw: Vec<f64> = (0..n).flat_map(|i| centers.iter().map(move |&c| (i as f64 - c) * norm)).collect();
    let mut uniq = raw.clone();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let idx = raw.iter().map(|v| uniq.binary_search_by(|u| u.total_cmp(v)).expect("present")).collect();
    (uniq, idx)
}

/// Rows of the distinct-offset table [`build_relative_coords`] would build,
/// without materializing the per-pair index.
pub(crate) fn unique_offset_count(h: usize, w: usize, pool_h: usize, pool_w: usize, train_h: usize, train_w: usize) -> usize {
    axis_offsets(h, pool_h, train_h).0.len() * axis_offsets(w, pool_w, train_w).0.len()
}

/// `train_h × train_w` is the extent of this feature map at the training
/// resolution; it fixes the coordinate normalization across resolutions.
pub fn build_relative_coords(
    h: usize,
    w: usize,
    pool_h: usize,
    pool_w: usize,
    train_h: usize,
    train_w: usize,
) -> Result<RelativeCoords> {
    if pool_h == 0 || pool_w == 0 || pool_h > h || pool_w > w {
        return Err(shape_err!("pool {pool_h}x{pool_w} does not fit feature map {h}x{w}"));
    }
    let (uh, ih) = axis_offsets(h, pool_h, train_h);
    let (uw, iw) = axis_offsets(w, pool_w, train_w);
    let mut table = Vec::with_capacity(uh.len() * uw.len() * 2);
    for &dy in &uh {
        for &dx in &uw {
            table.push(log_spaced(dy));
            table.push(log_spaced(dx));
        }
    }
    let mut index = Vec::with_capacity(h * w * pool_h * pool_w);
    for i in 0..h {
        for j in 0..w {
            for a in 0..pool_h {
                for b in 0..pool_w {
                    index.push(ih[i * pool_h + a] * uw.len() + iw[j * pool_w + b]);
                }
            }
        }
    }
    Ok(RelativeCoords { h, w, pool_h, pool_w, table: table.into_tensor(&[uh.len() * uw.len(), 2]), index })
}

impl RelativeCoords {
    /// `[U, 2]` distinct log-spaced offsets.
    pub fn table(&self) -> &Tensor<f64> {
        &self.table
    }

    /// Row of [`Self::table`] used by each (pixel, pooled key) pair.
    pub fn index(&self) -> &[usize] {
        &self.index
    }

    /// Full `[H·W, L, 2]` offsets.
    pub fn delta(&self) -> Tensor<f64> {
        let mut out = Vec::with_capacity(self.index.len() * 2);
        for &i in &self.index {
            out.extend_from_slice(&self.table.data()[i * 2..i * 2 + 2]);
        }
        out.into_tensor(&[self.h * self.w, self.pool_h * self.pool_w, 2])
    }

    pub(crate) fn matches(&self, geom: &WindowGeometry) -> bool {
        (self.h, self.w, self.pool_h, self.pool_w) == (geom.h, geom.w, geom.pool_h, geom.pool_w)
    }
}

/// Pooled-path bias `[heads, H·W, L]`. The MLP runs once per distinct offset.
pub fn log_cpb<T: Scalar>(coords: &RelativeCoords, mlp: &CpbMlp<T>) -> Result<Tensor<T>> {
    let per_offset = mlp.forward(&coords.table.cast())?;
    let heads = mlp.heads();
    let pairs = coords.index.len();
    let mut out = Vec::with_capacity(heads * pairs);
    for h in 0..heads {
        out.extend(coords.index.iter().map(|&i| per_offset.data()[i * heads + h]));
    }
    Ok(out.into_tensor(&[heads, coords.h * coords.w, coords.pool_h * coords.pool_w]))
}

/// Bilinear resampling of the last two axes, corners aligned.
pub fn interpolate_bias<T: Scalar>(bias: &Tensor<T>, new_h: usize, new_w: usize) -> Result<Tensor<T>> {
    let r = bias.rank();
    if r < 2 {
        return Err(shape_err!("bias table needs at least two axes, got {:?}", bias.dims()));
    }
    if new_h == 0 || new_w == 0 {
        return Err(shape_err!("cannot resample to {new_h}x{new_w}"));
    }
    let (sh, sw) = (bias.dims()[r - 2], bias.dims()[r - 1]);
    if (sh, sw) == (new_h, new_w) {
        return Ok(bias.clone());
    }
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let x = if n_out == 1 { 0.0 } else { o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64 };
                let lo = (x.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(new_h, sh), taps(new_w, sw));
    let mut dims = bias.dims().to_vec();
    dims[r - 2] = new_h;
    dims[r - 1] = new_w;
    let mut out = Vec::with_capacity(bias.len() / (sh * sw) * new_h * new_w);
    for plane in bias.data().chunks_exact(sh * sw) {
        let at = |y: usize, x: usize| plane[y * sw + x].as_f64();
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::from_f64(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Ok(out.into_tensor(&dims))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggAttentionParams<T> {
    pub pfa: PfaParams<T>,
    /// `[heads, d]`
    pub qe: Option<Tensor<T>>,
    /// `[heads, d, k²]`
    pub pos_tokens: Option<Tensor<T>>,
    /// `[heads]`, passed through softplus at use.
    pub tau_raw: Tensor<T>,
    pub cpb: CpbMlp<T>,
    pub similarity: Similarity,
}

impl<T: Scalar> AggAttentionParams<T> {
    pub fn cast<U: Scalar>(&self) -> AggAttentionParams<U> {
        AggAttentionParams {
            pfa: self.pfa.cast(),
            qe: self.qe.as_ref().map(Tensor::cast),
            pos_tokens: self.pos_tokens.as_ref().map(Tensor::cast),
            tau_raw: self.tau_raw.cast(),
            cpb: self.cpb.cast(),
            similarity: self.similarity,
        }
    }

    fn check(&self, geom: &WindowGeometry, coords: &RelativeCoords) -> Result<()> {
        let (heads, d) = (self.pfa.heads, self.pfa.head_dim);
        if let Some(qe) = &self.qe {
            if qe.dims() != [heads, d] {
                return Err(shape_err!("query embedding {:?} is not [{heads}, {d}]", qe.dims()));
            }
        }
        if let Some(t) = &self.pos_tokens {
            if t.dims() != [heads, d, geom.slots()] {
                return Err(shape_err!("positional tokens {:?} are not [{heads}, {d}, {}]", t.dims(), geom.slots()));
            }
        }
        if self.tau_raw.dims() != [heads] || self.cpb.heads() != heads || self.cpb.fc1.in_features() != 2 {
            return Err(shape_err!("temperature or position-bias MLP does not match {heads} heads"));
        }
        if !coords.matches(geom) {
            return Err(shape_err!(
                "relative coordinates for {}x{} / {}x{} used with geometry {}x{} / {}x{}",
                coords.h,
                coords.w,
                coords.pool_h,
                coords.pool_w,
                geom.h,
                geom.w,
                geom.pool_h,
                geom.pool_w
            ));
        }
        Ok(())
    }
}

/// Adds a per-head vector to every row of `[heads, N, d]`.
fn add_per_head<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (x.dims()[1], x.dims()[2]);
    let mut data = x.data().to_vec();
    for (i, row) in data.chunks_exact_mut(d).enumerate() {
        let h = i / n;
        for (a, &b) in row.iter_mut().zip(&v.data()[h * d..][..d]) {
            *a += b;
        }
    }
    data.into_tensor(x.dims())
}

fn aa_weights_and_output<T: Scalar>(
    x: &Tensor<T>,
    params: &AggAttentionParams<T>,
    geom: &WindowGeometry,
    coords: &RelativeCoords,
) -> Result<(Tensor<T>, Tensor<T>)> {
    params.check(geom, coords)?;
    let pfa = &params.pfa;
    let pr = project(x, pfa, geom)?;
    let (heads, n) = (pfa.heads, geom.pixels());
    let (qn, kn, kpn, scale) = match params.similarity {
        Similarity::LengthScaledCosine => {
            let mut scale = Vec::with_capacity(heads * n);
            for h in 0..heads {
                let tau = softplus(params.tau_raw.data()[h]);
                for &ne in geom.n_eff().data() {
                    scale.push(length_scale(tau, ne)?);
                }
            }
            (cosine_normalize(&pr.q), cosine_normalize(&pr.k), cosine_normalize(&pr.kp), scale)
        }
        Similarity::ScaledDot => (
            pr.q.clone(),
            pr.k.clone(),
            pr.kp.clone(),
            vec![T::from_f64(1.0 / (pfa.head_dim as f64).sqrt()); heads * n],
        ),
    };
    let q_sim = match &params.qe {
        Some(qe) => add_per_head(&qn, qe),
        None => qn.clone(),
    };
    let bias = log_cpb(coords, &params.cpb)?;
    let dp = DualPath {
        geom,
        q: &q_sim,
        k: &kn,
        v: &pr.v,
        kp: &kpn,
        vp: &pr.vp,
        scale: &scale,
        window_bias: &pfa.window_bias,
        pooled_bias: Some(&bias),
        positional: params.pos_tokens.as_ref().map(|t| (&qn, t)),
    };
    let wts = dp.weights()?;
    let out = merge_heads(&dp.output(&wts)?);
    Ok((concat_weights(&wts), out))
}

/// Token-level forward: `[H·W, C]` in, `[H·W, C]` out, before the output
/// projection.
pub(crate) fn aa_tokens<T: Scalar>(
    x: &Tensor<T>,
    params: &AggAttentionParams<T>,
    geom: &WindowGeometry,
    coords: &RelativeCoords,
) -> Result<Tensor<T>> {
    Ok(aa_weights_and_output(x, params, geom, coords)?.1)
}

fn check_input<T: Scalar>(x: &Tensor<T>, c_expected: usize, geom: &WindowGeometry) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if (h, w) != (geom.h, geom.w) || c != c_expected {
        return Err(shape_err!(
            "input {:?} does not match [{c_expected}, {}, {}]",
            x.dims(),
            geom.h,
            geom.w
        ));
    }
    x.chw_to_tokens()
}

/// Aggregated attention on a `[C, H, W]` map.
pub fn aggregated_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AggAttentionParams<T>,
    geom: &WindowGeometry,
    coords: &RelativeCoords,
) -> Result<Tensor<T>> {
    let tokens = check_input(x, params.pfa.channels(), geom)?;
    tokens_to_chw(&aa_tokens(&tokens, params, geom, coords)?, geom.h, geom.w)
}

/// Attention weights `[heads, H·W, k² + L]`, window slots first. Window
/// weights include the positional term.
pub fn aggregated_attention_weights<T: Scalar>(
    x: &Tensor<T>,
    params: &AggAttentionParams<T>,
    geom: &WindowGeometry,
    coords: &RelativeCoords,
) -> Result<Tensor<T>> {
    let tokens = check_input(x, params.pfa.channels(), geom)?;
    Ok(aa_weights_and_output(&tokens, params, geom, coords)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhsaParams<T> {
    pub q_proj: LinearParams<T>,
    pub k_proj: LinearParams<T>,
    pub v_proj: LinearParams<T>,
    /// `[heads, d]`
    pub qe: Option<Tensor<T>>,
    /// `[heads]`
    pub tau_raw: Tensor<T>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Scalar> MhsaParams<T> {
    pub fn cast<U: Scalar>(&self) -> MhsaParams<U> {
        MhsaParams {
            q_proj: self.q_proj.cast(),
            k_proj: self.k_proj.cast(),
            v_proj: self.v_proj.cast(),
            qe: self.qe.as_ref().map(Tensor::cast),
            tau_raw: self.tau_raw.cast(),
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }
}

fn mhsa_parts<T: Scalar>(x: &Tensor<T>, params: &MhsaParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c) = (x.dims()[0], x.dims()[1]);
    let (heads, d) = (params.heads, params.head_dim);
    if c != heads * d {
        return Err(shape_err!("input has {c} channels, attention expects {heads} x {d}"));
    }
    if params.tau_raw.dims() != [heads] {
        return Err(shape_err!("temperature {:?} is not [{heads}]", params.tau_raw.dims()));
    }
    let qn = cosine_normalize(&split_heads(&params.q_proj.forward(x)?, heads));
    let q = match &params.qe {
        Some(qe) if qe.dims() == [heads, d] => add_per_head(&qn, qe),
        Some(qe) => return Err(shape_err!("query embedding {:?} is not [{heads}, {d}]", qe.dims())),
        None => qn,
    };
    let k = cosine_normalize(&split_heads(&params.k_proj.forward(x)?, heads));
    let v = split_heads(&params.v_proj.forward(x)?, heads);
    let mut attn = vec![T::zero(); heads * n * n];
    let mut out = vec![T::zero(); heads * n * d];
    for h in 0..heads {
        let scale = length_scale(softplus(params.tau_raw.data()[h]), n)?;
        let kt = transpose2d(&k.data()[h * n * d..][..n * d], n, d);
        let a = &mut attn[h * n * n..][..n * n];
        gemm(n, d, n, &q.data()[h * n * d..][..n * d], &kt, a);
        for row in a.chunks_exact_mut(n) {
            row.iter_mut().for_each(|v| *v *= scale);
            softmax_row(row, None)?;
        }
        gemm(n, n, d, a, &v.data()[h * n * d..][..n * d], &mut out[h * n * d..][..n * d]);
    }
    Ok((attn.into_tensor(&[heads, n, n]), merge_heads(&out.into_tensor(&[heads, n, d]))))
}

pub(crate) fn mhsa_tokens<T: Scalar>(x: &Tensor<T>, params: &MhsaParams<T>) -> Result<Tensor<T>> {
    Ok(mhsa_parts(x, params)?.1)
}

/// Global cosine attention with query embedding on a `[C, H, W]` map, before
/// the output projection.
pub fn mhsa_stage4_forward<T: Scalar>(x: &Tensor<T>, params: &MhsaParams<T>) -> Result<Tensor<T>> {
    let (_, h, w) = x.chw()?;
    tokens_to_chw(&mhsa_tokens(&x.chw_to_tokens()?, params)?, h, w)
}

/// `[heads, H·W, H·W]` global attention weights.
pub fn mhsa_attention_weights<T: Scalar>(x: &Tensor<T>, params: &MhsaParams<T>) -> Result<Tensor<T>> {
    Ok(mhsa_parts(&x.chw_to_tokens()?, params)?.0)
}

/// Mean softmax entropy of one random unit query against `n` random unit
/// keys in `d` dimensions at scale `ln(n)/0.24`, for each `n`.
pub fn entropy_profile(d: usize, ns: &[usize], trials: usize, seed: u64) -> Vec<(usize, f64)> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = crate::oracle::rng(seed);
    let unit = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    };
    ns.iter()
        .map(|&n| {
            let lambda = (n as f64).ln() / 0.24;
            let mut total = 0.0;
            for _ in 0..trials {
                let q = unit(&mut rng);
                let mut row: Vec<f64> = (0..n)
                    .map(|_| lambda * unit(&mut rng).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                softmax_row(&mut row, None).expect("unmasked row");
                total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            }
            (n, total / trials as f64)
        })
        .collect()
}

//! Pixel-focused attention: every pixel attends to a `k×k` window around
//! itself and to a pooled copy of the whole map, with both key sets sharing
//! one softmax.

use crate::error::{config_err, shape_err, Result};
use crate::kernel::{fused_window_av, fused_window_qk};
use crate::tensor::{
    adaptive_avg_pool, gelu, gemm, softmax_row, tokens_to_chw, transpose2d, IntoTensor,
    LayerNormParams, LinearParams, Scalar, Tensor,
};

/// Index sets of the window and pooled paths for one feature-map size.
///
/// Window slots are numbered row-major over the `k×k` neighbourhood, so the
/// centre pixel is slot `(k²−1)/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGeometry {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    mask: Tensor<bool>,
    n_eff: Tensor<usize>,
}

pub fn build_geometry(h: usize, w: usize, k: usize, pool_h: usize, pool_w: usize) -> Result<WindowGeometry> {
    if k.is_multiple_of(2) {
        return Err(config_err!("window extent must be odd, got {k}"));
    }
    if h == 0 || w == 0 {
        return Err(shape_err!("empty feature map {h}x{w}"));
    }
    if pool_h == 0 || pool_w == 0 || pool_h > h || pool_w > w {
        return Err(shape_err!("pool {pool_h}x{pool_w} does not fit feature map {h}x{w}"));
    }
    let slots = k * k;
    let r = (k / 2) as isize;
    let mut mask = Vec::with_capacity(h * w * slots);
    let mut n_eff = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut masked = 0;
            for s in 0..slots as isize {
                let y = i + s / k as isize - r;
                let x = j + s % k as isize - r;
                let out = y < 0 || y >= h as isize || x < 0 || x >= w as isize;
                masked += out as usize;
                mask.push(out);
            }
            n_eff.push(slots + pool_h * pool_w - masked);
        }
    }
    Ok(WindowGeometry {
        k,
        h,
        w,
        pool_h,
        pool_w,
        mask: mask.into_tensor(&[h, w, slots]),
        n_eff: n_eff.into_tensor(&[h, w]),
    })
}

impl WindowGeometry {
    pub fn slots(&self) -> usize {
        self.k * self.k
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn pooled_len(&self) -> usize {
        self.pool_h * self.pool_w
    }

    /// `[h, w, k²]`, true where the slot falls outside the map.
    pub fn mask(&self) -> &Tensor<bool> {
        &self.mask
    }

    /// `[h, w]` count of keys each pixel really attends to.
    pub fn n_eff(&self) -> &Tensor<usize> {
        &self.n_eff
    }

    pub(crate) fn mask_row(&self, pixel: usize) -> &[bool] {
        let s = self.slots();
        &self.mask.data()[pixel * s..(pixel + 1) * s]
    }

    /// Flat index of the pixel under slot `s` of `pixel`, if inside the map.
    pub fn neighbor(&self, pixel: usize, s: usize) -> Option<usize> {
        if self.mask_row(pixel)[s] {
            return None;
        }
        let r = self.k / 2;
        let y = pixel / self.w + s / self.k - r;
        let x = pixel % self.w + s % self.k - r;
        Some(y * self.w + x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PfaParams<T> {
    pub q_proj: LinearParams<T>,
    pub k_proj: LinearParams<T>,
    pub v_proj: LinearParams<T>,
    pub pool_proj: LinearParams<T>,
    pub pool_norm: LayerNormParams<T>,
    /// `[heads, k²]`
    pub window_bias: Tensor<T>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Scalar> PfaParams<T> {
    pub fn cast<U: Scalar>(&self) -> PfaParams<U> {
        PfaParams {
            q_proj: self.q_proj.cast(),
            k_proj: self.k_proj.cast(),
            v_proj: self.v_proj.cast(),
            pool_proj: self.pool_proj.cast(),
            pool_norm: self.pool_norm.cast(),
            window_bias: self.window_bias.cast(),
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub(crate) fn check(&self, c: usize, geom: &WindowGeometry) -> Result<()> {
        if c != self.channels() {
            return Err(shape_err!(
                "input has {c} channels, attention expects {} heads x {}",
                self.heads,
                self.head_dim
            ));
        }
        for p in [&self.q_proj, &self.k_proj, &self.v_proj, &self.pool_proj] {
            if p.in_features() != c || p.out_features() != c {
                return Err(shape_err!("projection {:?} is not {c}x{c}", p.weight.dims()));
            }
        }
        if self.window_bias.dims() != [self.heads, geom.slots()] {
            return Err(shape_err!(
                "window bias {:?} does not match {} heads x {} slots",
                self.window_bias.dims(),
                self.heads,
                geom.slots()
            ));
        }
        Ok(())
    }
}

/// `[N, heads·d]` rows to `[heads, N, d]`.
pub(crate) fn split_heads<T: Scalar>(t: &Tensor<T>, heads: usize) -> Tensor<T> {
    let (n, c) = (t.dims()[0], t.dims()[1]);
    let d = c / heads;
    let mut out = Vec::with_capacity(n * c);
    for h in 0..heads {
        for row in t.data().chunks_exact(c) {
            out.extend_from_slice(&row[h * d..(h + 1) * d]);
        }
    }
    out.into_tensor(&[heads, n, d])
}

/// `[heads, N, d]` to `[N, heads·d]`.
pub(crate) fn merge_heads<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (heads, n, d) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let mut out = Vec::with_capacity(t.len());
    for p in 0..n {
        for h in 0..heads {
            out.extend_from_slice(&t.data()[(h * n + p) * d..][..d]);
        }
    }
    out.into_tensor(&[n, heads * d])
}

pub(crate) fn activate_and_pool_tokens<T: Scalar>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    proj: &LinearParams<T>,
    norm: &LayerNormParams<T>,
    pool_h: usize,
    pool_w: usize,
) -> Result<Tensor<T>> {
    let act = gelu(&proj.forward(x)?);
    let pooled = adaptive_avg_pool(&tokens_to_chw(&act, h, w)?, pool_h, pool_w)?;
    norm.forward(&pooled.chw_to_tokens()?)
}

/// `LayerNorm(AvgPool(GELU(Linear(x))))` on a `[C, H, W]` map.
pub fn activate_and_pool<T: Scalar>(x: &Tensor<T>, params: &PfaParams<T>, geom: &WindowGeometry) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    check_map(c, h, w, params, geom)?;
    let tokens = activate_and_pool_tokens(
        &x.chw_to_tokens()?,
        h,
        w,
        &params.pool_proj,
        &params.pool_norm,
        geom.pool_h,
        geom.pool_w,
    )?;
    tokens_to_chw(&tokens, geom.pool_h, geom.pool_w)
}

fn check_map<T: Scalar>(c: usize, h: usize, w: usize, params: &PfaParams<T>, geom: &WindowGeometry) -> Result<()> {
    if (h, w) != (geom.h, geom.w) {
        return Err(shape_err!("feature map {h}x{w} does not match geometry {}x{}", geom.h, geom.w));
    }
    params.check(c, geom)
}

/// Everything the shared dual-path softmax needs, already split into heads.
pub(crate) struct DualPath<'a, T> {
    pub geom: &'a WindowGeometry,
    /// `[heads, N, d]` queries used for similarity.
    pub q: &'a Tensor<T>,
    pub k: &'a Tensor<T>,
    pub v: &'a Tensor<T>,
    /// `[heads, L, d]`
    pub kp: &'a Tensor<T>,
    pub vp: &'a Tensor<T>,
    /// `[heads, N]` multiplier applied to raw similarities.
    pub scale: &'a [T],
    pub window_bias: &'a Tensor<T>,
    /// `[heads, N, L]`; zero when absent.
    pub pooled_bias: Option<&'a Tensor<T>>,
    /// Positional term added to window weights after the softmax:
    /// `[heads, N, d]` normalized queries and `[heads, d, k²]` tokens.
    pub positional: Option<(&'a Tensor<T>, &'a Tensor<T>)>,
}

/// Attention weights of the two paths: `[heads, N, k²]` and `[heads, N, L]`.
pub(crate) struct DualWeights<T> {
    pub window: Tensor<T>,
    pub pooled: Tensor<T>,
}

impl<T: Scalar> DualPath<'_, T> {
    pub fn weights(&self) -> Result<DualWeights<T>> {
        let g = self.geom;
        let (heads, n, d) = (self.q.dims()[0], g.pixels(), self.q.dims()[2]);
        let (slots, l) = (g.slots(), g.pooled_len());
        let as4 = |t: &Tensor<T>| t.reshape(&[heads, g.h, g.w, d]);
        let mut window = fused_window_qk(&as4(self.q)?, &as4(self.k)?, g)?.into_data();

        let mut pooled = vec![T::zero(); heads * n * l];
        for h in 0..heads {
            let kt = transpose2d(&self.kp.data()[h * l * d..][..l * d], l, d);
            gemm(n, d, l, &self.q.data()[h * n * d..][..n * d], &kt, &mut pooled[h * n * l..][..n * l]);
        }

        let mut row = vec![T::zero(); slots + l];
        let mut row_mask = vec![false; slots + l];
        for h in 0..heads {
            let wb = &self.window_bias.data()[h * slots..][..slots];
            for p in 0..n {
                let s = self.scale[h * n + p];
                let wrow = &mut window[(h * n + p) * slots..][..slots];
                let prow = &mut pooled[(h * n + p) * l..][..l];
                for (dst, (&v, &b)) in row.iter_mut().zip(wrow.iter().zip(wb)) {
                    *dst = v * s + b;
                }
                for (i, (dst, &v)) in row[slots..].iter_mut().zip(prow.iter()).enumerate() {
                    *dst = v * s;
                    if let Some(pb) = self.pooled_bias {
                        *dst += pb.data()[(h * n + p) * l + i];
                    }
                }
                row_mask[..slots].copy_from_slice(g.mask_row(p));
                softmax_row(&mut row, Some(&row_mask))?;
                wrow.copy_from_slice(&row[..slots]);
                prow.copy_from_slice(&row[slots..]);
            }
        }

        if let Some((qn, tokens)) = self.positional {
            let mut extra = vec![T::zero(); n * slots];
            for h in 0..heads {
                gemm(
                    n,
                    d,
                    slots,
                    &qn.data()[h * n * d..][..n * d],
                    &tokens.data()[h * d * slots..][..d * slots],
                    &mut extra,
                );
                for p in 0..n {
                    let wrow = &mut window[(h * n + p) * slots..][..slots];
                    for ((dst, &e), &m) in wrow.iter_mut().zip(&extra[p * slots..][..slots]).zip(g.mask_row(p)) {
                        if !m {
                            *dst += e;
                        }
                    }
                }
            }
        }

        Ok(DualWeights {
            window: window.into_tensor(&[heads, n, slots]),
            pooled: pooled.into_tensor(&[heads, n, l]),
        })
    }

    /// `[heads, N, d]` attention output.
    pub fn output(&self, wts: &DualWeights<T>) -> Result<Tensor<T>> {
        let g = self.geom;
        let (heads, n, d) = (self.q.dims()[0], g.pixels(), self.q.dims()[2]);
        let l = g.pooled_len();
        let local = fused_window_av(
            &wts.window.reshape(&[heads, g.h, g.w, g.slots()])?,
            &self.v.reshape(&[heads, g.h, g.w, d])?,
            g,
        )?;
        let mut out = local.into_data();
        let mut glob = vec![T::zero(); n * d];
        for h in 0..heads {
            gemm(
                n,
                l,
                d,
                &wts.pooled.data()[h * n * l..][..n * l],
                &self.vp.data()[h * l * d..][..l * d],
                &mut glob,
            );
            for (o, &gv) in out[h * n * d..][..n * d].iter_mut().zip(&glob) {
                *o += gv;
            }
        }
        Ok(out.into_tensor(&[heads, n, d]))
    }
}

/// Per-head projections of one feature map.
pub(crate) struct Projected<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub kp: Tensor<T>,
    pub vp: Tensor<T>,
}

pub(crate) fn project<T: Scalar>(x: &Tensor<T>, params: &PfaParams<T>, geom: &WindowGeometry) -> Result<Projected<T>> {
    let pooled = activate_and_pool_tokens(
        x,
        geom.h,
        geom.w,
        &params.pool_proj,
        &params.pool_norm,
        geom.pool_h,
        geom.pool_w,
    )?;
    let hs = params.heads;
    Ok(Projected {
        q: split_heads(&params.q_proj.forward(x)?, hs),
        k: split_heads(&params.k_proj.forward(x)?, hs),
        v: split_heads(&params.v_proj.forward(x)?, hs),
        kp: split_heads(&params.k_proj.forward(&pooled)?, hs),
        vp: split_heads(&params.v_proj.forward(&pooled)?, hs),
    })
}

fn pfa_dual<'a, T: Scalar>(
    pr: &'a Projected<T>,
    params: &'a PfaParams<T>,
    geom: &'a WindowGeometry,
    scale: &'a [T],
) -> DualPath<'a, T> {
    DualPath {
        geom,
        q: &pr.q,
        k: &pr.k,
        v: &pr.v,
        kp: &pr.kp,
        vp: &pr.vp,
        scale,
        window_bias: &params.window_bias,
        pooled_bias: None,
        positional: None,
    }
}

fn inv_sqrt_scale<T: Scalar>(params: &PfaParams<T>, geom: &WindowGeometry) -> Vec<T> {
    vec![T::from_f64(1.0 / (params.head_dim as f64).sqrt()); params.heads * geom.pixels()]
}

/// Token-level forward: `x` is `[H·W, C]`, result is `[H·W, C]` before any
/// output projection.
pub(crate) fn pfa_tokens<T: Scalar>(x: &Tensor<T>, params: &PfaParams<T>, geom: &WindowGeometry) -> Result<Tensor<T>> {
    let pr = project(x, params, geom)?;
    let scale = inv_sqrt_scale(params, geom);
    let dp = pfa_dual(&pr, params, geom, &scale);
    let wts = dp.weights()?;
    Ok(merge_heads(&dp.output(&wts)?))
}

/// Dual-path forward on a `[C, H, W]` map.
pub fn pfa_forward<T: Scalar>(x: &Tensor<T>, params: &PfaParams<T>, geom: &WindowGeometry) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    check_map(c, h, w, params, geom)?;
    tokens_to_chw(&pfa_tokens(&x.chw_to_tokens()?, params, geom)?, h, w)
}

/// Joint attention weights `[heads, H·W, k² + L]`, window slots first.
pub fn pfa_attention_weights<T: Scalar>(
    x: &Tensor<T>,
    params: &PfaParams<T>,
    geom: &WindowGeometry,
) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    check_map(c, h, w, params, geom)?;
    let pr = project(&x.chw_to_tokens()?, params, geom)?;
    let scale = inv_sqrt_scale(params, geom);
    let wts = pfa_dual(&pr, params, geom, &scale).weights()?;
    Ok(concat_weights(&wts))
}

pub(crate) fn concat_weights<T: Scalar>(wts: &DualWeights<T>) -> Tensor<T> {
    let (heads, n, s) = (wts.window.dims()[0], wts.window.dims()[1], wts.window.dims()[2]);
    let l = wts.pooled.dims()[2];
    let mut out = Vec::with_capacity(heads * n * (s + l));
    for (wr, pr) in wts.window.data().chunks_exact(s).zip(wts.pooled.data().chunks_exact(l)) {
        out.extend_from_slice(wr);
        out.extend_from_slice(pr);
    }
    out.into_tensor(&[heads, n, s + l])
}

/// Reference form: per pixel, materializes `Concat(K_ρ, K_σ)` and
/// `Concat(V_ρ, V_σ)` and runs one ordinary masked attention.
pub fn pfa_concat_oracle<T: Scalar>(x: &Tensor<T>, params: &PfaParams<T>, geom: &WindowGeometry) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    check_map(c, h, w, params, geom)?;
    let pr = project(&x.chw_to_tokens()?, params, geom)?;
    let (heads, d) = (params.heads, params.head_dim);
    let (n, slots, l) = (geom.pixels(), geom.slots(), geom.pooled_len());
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let row = |t: &Tensor<T>, h: usize, len: usize, i: usize| -> Vec<T> { t.data()[(h * len + i) * d..][..d].to_vec() };

    let mut out = vec![T::zero(); heads * n * d];
    for hd in 0..heads {
        for p in 0..n {
            let mut keys = Vec::with_capacity(slots + l);
            let mut vals = Vec::with_capacity(slots + l);
            let mut mask = Vec::with_capacity(slots + l);
            let mut bias = Vec::with_capacity(slots + l);
            for s in 0..slots {
                match geom.neighbor(p, s) {
                    Some(nb) => {
                        keys.push(row(&pr.k, hd, n, nb));
                        vals.push(row(&pr.v, hd, n, nb));
                        mask.push(false);
                    }
                    None => {
                        keys.push(vec![T::zero(); d]);
                        vals.push(vec![T::zero(); d]);
                        mask.push(true);
                    }
                }
                bias.push(params.window_bias.data()[hd * slots + s]);
            }
            for a in 0..l {
                keys.push(row(&pr.kp, hd, l, a));
                vals.push(row(&pr.vp, hd, l, a));
                mask.push(false);
                bias.push(T::zero());
            }
            let q = row(&pr.q, hd, n, p);
            let mut logits: Vec<T> = keys
                .iter()
                .zip(&bias)
                .map(|(kv, &b)| q.iter().zip(kv).map(|(&a, &b)| a * b).sum::<T>() * scale + b)
                .collect();
            softmax_row(&mut logits, Some(&mask))?;
            let dst = &mut out[(hd * n + p) * d..][..d];
            for (wgt, val) in logits.iter().zip(&vals) {
                for (o, &v) in dst.iter_mut().zip(val) {
                    *o += *wgt * v;
                }
            }
        }
    }
    let merged = merge_heads(&out.into_tensor(&[heads, n, d]));
    tokens_to_chw(&merged, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{self, rand_tensor};

    #[test]
    fn geometry_examples() {
        let g = build_geometry(10, 10, 3, 2, 2).unwrap();
        assert_eq!(g.n_eff().get(&[4, 5]), Some(&13));
        assert_eq!(g.n_eff().get(&[0, 0]), Some(&8));
        let corner = &g.mask().data()[..9];
        assert_eq!(corner.iter().filter(|&&m| m).count(), 5);
        assert_eq!(corner, &[true, true, true, true, false, false, true, false, false]);

        let g1 = build_geometry(4, 3, 1, 1, 1).unwrap();
        assert!(g1.mask().data().iter().all(|&m| !m));
        assert!(g1.n_eff().data().iter().all(|&n| n == 2));

        assert!(matches!(build_geometry(4, 4, 2, 1, 1), Err(crate::Error::Config(_))));
        assert!(build_geometry(4, 4, 3, 5, 1).is_err());
    }

    #[test]
    fn geometry_interior_has_no_masked_slots() {
        let g = build_geometry(9, 11, 5, 3, 3).unwrap();
        for i in 2..7 {
            for j in 2..9 {
                assert!(g.mask_row(i * 11 + j).iter().all(|&m| !m));
                assert_eq!(g.n_eff().get(&[i, j]), Some(&(25 + 9)));
            }
        }
        assert_eq!(g.neighbor(0, 12), Some(0));
        assert_eq!(g.neighbor(12, 24), Some(12 + 2 * 11 + 2));
    }

    #[test]
    fn pool_stage_one_extent() {
        let g = build_geometry(56, 56, 3, 7, 7).unwrap();
        let mut rng = oracle::rng(1);
        let params = oracle::random_pfa_params::<f64>(&mut rng, 2, 4, 3);
        let x = rand_tensor(&mut rng, &[8, 56, 56]);
        assert_eq!(activate_and_pool(&x, &params, &g).unwrap().dims(), &[8, 7, 7]);
    }

    #[test]
    fn activate_and_pool_constant_input_is_zero() {
        let mut rng = oracle::rng(2);
        let mut params = oracle::random_pfa_params::<f64>(&mut rng, 1, 4, 3);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        params.pool_proj = LinearParams::new(Tensor::from_f64_slice(&[4, 4], &eye).unwrap(), None).unwrap();
        params.pool_norm = LayerNormParams::identity(4).unwrap();
        let g = build_geometry(6, 6, 3, 2, 3).unwrap();
        let x = Tensor::full(&[4, 6, 6], 0.7).unwrap();
        let out = activate_and_pool(&x, &params, &g).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn activate_and_pool_matches_composition() {
        let mut rng = oracle::rng(3);
        let params = oracle::random_pfa_params::<f64>(&mut rng, 2, 3, 3);
        let g = build_geometry(7, 5, 3, 3, 2).unwrap();
        let x = rand_tensor(&mut rng, &[6, 7, 5]);
        let got = activate_and_pool(&x, &params, &g).unwrap();
        let want = oracle::activate_and_pool_composed(&x, &params.pool_proj, &params.pool_norm, 3, 2);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn zero_qk_gives_uniform_mean() {
        let mut rng = oracle::rng(4);
        let mut params = oracle::random_pfa_params::<f64>(&mut rng, 1, 3, 3);
        let zero = LinearParams::new(Tensor::zeros(&[3, 3]).unwrap(), None).unwrap();
        params.q_proj = zero.clone();
        params.k_proj = zero;
        params.window_bias = Tensor::zeros(&[1, 9]).unwrap();
        let g = build_geometry(4, 5, 3, 2, 2).unwrap();
        let x = rand_tensor(&mut rng, &[3, 4, 5]);
        let out = pfa_forward(&x, &params, &g).unwrap();

        let tokens = x.chw_to_tokens().unwrap();
        let v = params.v_proj.forward(&tokens).unwrap();
        let pooled = activate_and_pool_tokens(&tokens, 4, 5, &params.pool_proj, &params.pool_norm, 2, 2).unwrap();
        let vp = params.v_proj.forward(&pooled).unwrap();
        for p in 0..20 {
            let mut want = [0.0; 3];
            let mut count = 0.0;
            for s in 0..9 {
                if let Some(nb) = g.neighbor(p, s) {
                    count += 1.0;
                    for c in 0..3 {
                        want[c] += v.data()[nb * 3 + c];
                    }
                }
            }
            for a in 0..4 {
                count += 1.0;
                for c in 0..3 {
                    want[c] += vp.data()[a * 3 + c];
                }
            }
            for c in 0..3 {
                let got = out.data()[c * 20 + p];
                assert!((got - want[c] / count).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_are_masked_and_normalized() {
        let mut rng = oracle::rng(5);
        let params = oracle::random_pfa_params::<f64>(&mut rng, 2, 2, 3);
        let g = build_geometry(6, 6, 3, 2, 2).unwrap();
        let x = rand_tensor(&mut rng, &[4, 6, 6]);
        let wts = pfa_attention_weights(&x, &params, &g).unwrap();
        for (r, row) in wts.data().chunks(13).enumerate() {
            let p = r % 36;
            for (s, &m) in g.mask_row(p).iter().enumerate() {
                if m {
                    assert_eq!(row[s], 0.0);
                }
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn dual_path_matches_concat_form() {
        let mut rng = oracle::rng(6);
        for (h, w, k, ph, pw, heads) in [(5, 7, 3, 2, 3, 2), (1, 1, 3, 1, 1, 1), (6, 4, 5, 3, 1, 1), (3, 8, 1, 1, 4, 2)] {
            let params = oracle::random_pfa_params::<f64>(&mut rng, heads, 3, k);
            let g = build_geometry(h, w, k, ph, pw).unwrap();
            let x = rand_tensor(&mut rng, &[heads * 3, h, w]);
            let dual = pfa_forward(&x, &params, &g).unwrap();
            let concat = pfa_concat_oracle(&x, &params, &g).unwrap();
            let scalar = oracle::scalar_pfa(&x, &params, &g);
            assert!(dual.max_abs_diff(&concat).unwrap() <= 1e-12);
            assert!(concat.max_abs_diff(&scalar).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn dual_path_matches_concat_form_f32() {
        let mut rng = oracle::rng(7);
        let params = oracle::random_pfa_params::<f64>(&mut rng, 2, 4, 3).cast::<f32>();
        let g = build_geometry(5, 7, 3, 2, 2).unwrap();
        let x = rand_tensor(&mut rng, &[8, 5, 7]).cast::<f32>();
        let dual = pfa_forward(&x, &params, &g).unwrap();
        let concat = pfa_concat_oracle(&x, &params, &g).unwrap();
        assert!(dual.max_abs_diff(&concat).unwrap() <= 1e-6);
    }

    #[test]
    fn single_pixel_output_is_value() {
        let mut rng = oracle::rng(8);
        let params = oracle::random_pfa_params::<f64>(&mut rng, 1, 3, 3);
        let g = build_geometry(1, 1, 3, 1, 1).unwrap();
        let x = rand_tensor(&mut rng, &[3, 1, 1]);
        let out = pfa_concat_oracle(&x, &params, &g).unwrap();
        let tokens = x.chw_to_tokens().unwrap();
        let v = params.v_proj.forward(&tokens).unwrap();
        let pooled = activate_and_pool_tokens(&tokens, 1, 1, &params.pool_proj, &params.pool_norm, 1, 1).unwrap();
        let vp = params.v_proj.forward(&pooled).unwrap();
        // One window key (the pixel itself) and one pooled key share the softmax.
        let q = params.q_proj.forward(&tokens).unwrap();
        let k = params.k_proj.forward(&tokens).unwrap();
        let kp = params.k_proj.forward(&pooled).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / 3f64.sqrt();
        let l0 = dot(q.data(), k.data()) + params.window_bias.data()[4];
        let l1 = dot(q.data(), kp.data());
        let w0 = 1.0 / (1.0 + (l1 - l0).exp());
        for c in 0..3 {
            let want = w0 * v.data()[c] + (1.0 - w0) * vp.data()[c];
            assert!((out.data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_linear_in_values() {
        let mut rng = oracle::rng(9);
        let params = oracle::random_pfa_params::<f64>(&mut rng, 2, 2, 3);
        let mut doubled = params.clone();
        doubled.v_proj.weight = params.v_proj.weight.scale(2.0);
        doubled.v_proj.bias = params.v_proj.bias.as_ref().map(|b| b.scale(2.0));
        let g = build_geometry(4, 4, 3, 2, 2).unwrap();
        let x = rand_tensor(&mut rng, &[4, 4, 4]);
        let a = pfa_concat_oracle(&x, &params, &g).unwrap();
        let b = pfa_concat_oracle(&x, &doubled, &g).unwrap();
        assert_eq!(a.scale(2.0), b);
    }
}

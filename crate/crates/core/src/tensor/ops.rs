use super::{counter, IntoTensor, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Epsilon used by every LayerNorm in the model.
pub const LAYERNORM_EPS: f64 = 1e-6;

/// Dense affine map `y = x·Wᵀ + b` with `weight` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let [out, _] = weight.dims()[..] else {
            return Err(shape_err!("linear weight must be [out, in], got {:?}", weight.dims()));
        };
        if let Some(b) = &bias {
            if b.dims() != [out] {
                return Err(shape_err!("linear bias {:?} does not match out={out}", b.dims()));
            }
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, self)
    }

    pub fn cast<U: Scalar>(&self) -> LinearParams<U> {
        LinearParams { weight: self.weight.cast(), bias: self.bias.as_ref().map(Tensor::cast) }
    }
}

/// Per-channel affine parameters of a LayerNorm over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layernorm(x, &self.gamma, &self.beta, T::from_f64(LAYERNORM_EPS))
    }

    pub fn identity(c: usize) -> Result<Self> {
        Ok(LayerNormParams { gamma: Tensor::full(&[c], T::one())?, beta: Tensor::zeros(&[c])? })
    }

    pub fn cast<U: Scalar>(&self) -> LayerNormParams<U> {
        LayerNormParams { gamma: self.gamma.cast(), beta: self.beta.cast() }
    }
}

pub(crate) fn transpose2d<T: Copy>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| data[r * cols + c]));
    }
    out
}

/// `out[m×n] = a[m×k] · b[k×n]`. Each output element is summed over `k`
/// strictly left to right, so results are bit-reproducible.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    counter::add((m * k * n) as u64);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        orow.fill(T::zero());
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.dims(), b.dims()) else {
        return Err(shape_err!("matmul needs rank-2 operands, got {:?} and {:?}", a.dims(), b.dims()));
    };
    if k != k2 {
        return Err(shape_err!("matmul inner extents differ: {:?} x {:?}", a.dims(), b.dims()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), b.data(), &mut out);
    Ok(out.into_tensor(&[m, n]))
}

/// Applies `p` to every row of `x: [N, in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let [n, cin] = x.dims()[..] else {
        return Err(shape_err!("linear input must be [N, in], got {:?}", x.dims()));
    };
    if cin != p.in_features() {
        return Err(shape_err!("linear expects {} input features, got {cin}", p.in_features()));
    }
    let cout = p.out_features();
    let wt = transpose2d(p.weight.data(), cout, cin);
    let mut out = vec![T::zero(); n * cout];
    gemm(n, cin, cout, x.data(), &wt, &mut out);
    if let Some(b) = &p.bias {
        for row in out.chunks_exact_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok(out.into_tensor(&[n, cout]))
}

/// Softmax of one row in place. Masked slots get the sentinel before the
/// max subtraction and come out as exact zeros.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) -> Result<()> {
    let masked = |i: usize| mask.is_some_and(|m| m[i]);
    if row.is_empty() || (0..row.len()).all(masked) {
        return Err(Error::Domain("softmax row has no unmasked entry".into()));
    }
    let mut max = T::neg_infinity();
    for (i, v) in row.iter_mut().enumerate() {
        if masked(i) {
            *v = T::sentinel();
        }
        max = max.max(*v);
    }
    let mut sum = T::zero();
    for (i, v) in row.iter_mut().enumerate() {
        if masked(i) {
            *v = T::zero();
        } else {
            *v = (*v - max).exp();
            sum += *v;
        }
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
    Ok(())
}

/// Softmax over the last axis. `mask` (same extents as `x`) marks entries
/// excluded from the normalization.
pub fn softmax<T: Scalar>(x: &Tensor<T>, mask: Option<&Tensor<bool>>) -> Result<Tensor<T>> {
    if let Some(m) = mask {
        if m.dims() != x.dims() {
            return Err(shape_err!("mask {:?} does not match logits {:?}", m.dims(), x.dims()));
        }
    }
    let n = *x.dims().last().expect("tensors have rank >= 1");
    let mut data = x.data().to_vec();
    for (r, row) in data.chunks_exact_mut(n).enumerate() {
        softmax_row(row, mask.map(|m| &m.data()[r * n..(r + 1) * n]))?;
    }
    Ok(data.into_tensor(x.dims()))
}

/// LayerNorm over the last axis (biased variance).
pub fn layernorm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let c = *x.dims().last().expect("tensors have rank >= 1");
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(shape_err!(
            "layernorm affine {:?}/{:?} does not match channel extent {c}",
            gamma.dims(),
            beta.dims()
        ));
    }
    let cn = T::from_f64(c as f64);
    let mut data = x.data().to_vec();
    for row in data.chunks_exact_mut(c) {
        let mean = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let inv = (var + eps).sqrt().recip();
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(data.into_tensor(x.dims()))
}

/// Exact-erf GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|&v| gelu_scalar(v))
}

/// Adaptive bucket `[floor(a·n/out), ceil((a+1)·n/out))`.
pub(crate) fn pool_bucket(a: usize, n: usize, out: usize) -> (usize, usize) {
    (a * n / out, ((a + 1) * n).div_ceil(out))
}

/// Adaptive average pooling of a `[C, H, W]` map to `[C, out_h, out_w]`.
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(shape_err!("cannot pool {h}x{w} to {out_h}x{out_w}"));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for a in 0..out_h {
            let (r0, r1) = pool_bucket(a, h, out_h);
            for b in 0..out_w {
                let (c0, c1) = pool_bucket(b, w, out_w);
                let mut sum = T::zero();
                for r in r0..r1 {
                    for col in c0..c1 {
                        sum += plane[r * w + col];
                    }
                }
                out.push(sum / T::from_f64(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    Ok(out.into_tensor(&[c, out_h, out_w]))
}

/// Per-channel 3×3 correlation, zero padding 1, stride 1, plus bias.
pub fn depthwise_conv3x3<T: Scalar>(x: &Tensor<T>, filt: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if filt.dims() != [c, 3, 3] {
        return Err(shape_err!("depthwise filter must be [{c}, 3, 3], got {:?}", filt.dims()));
    }
    if bias.dims() != [c] {
        return Err(shape_err!("depthwise bias must be [{c}], got {:?}", bias.dims()));
    }
    counter::add((c * h * w * 9) as u64);
    let src = x.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let f = &filt.data()[ch * 9..ch * 9 + 9];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for ky in 0..3 {
                    let y = i + ky;
                    if y == 0 || y > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = j + kx;
                        if xx == 0 || xx > w {
                            continue;
                        }
                        acc += f[ky * 3 + kx] * plane[(y - 1) * w + xx - 1];
                    }
                }
                dst[i * w + j] = acc + bias.data()[ch];
            }
        }
    }
    Ok(out.into_tensor(&[c, h, w]))
}

/// Dense 2-D convolution (cross-correlation) of `[Cin, H, W]` with
/// `[Cout, Cin, k, k]`, lowered to im2col + GEMM. The reduction runs over
/// `(ci, ky, kx)` in row-major order.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    filt: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (cin, h, w) = x.chw()?;
    let [cout, fcin, kh, kw] = filt.dims()[..] else {
        return Err(shape_err!("conv filter must be [Cout, Cin, k, k], got {:?}", filt.dims()));
    };
    if fcin != cin || kh != kw {
        return Err(shape_err!("conv filter {:?} incompatible with input {:?}", filt.dims(), x.dims()));
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err!("conv k={kh} stride={stride} pad={pad} does not fit {h}x{w}"));
    }
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return Err(shape_err!("conv bias must be [{cout}], got {:?}", b.dims()));
        }
    }
    let k = kh;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let p = ho * wo;
    let kk = cin * k * k;
    let src = x.data();
    let mut cols = vec![T::zero(); kk * p];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx >= 0 && xx < w as isize {
                            row[oy * wo + ox] = src[(ci * h + y as usize) * w + xx as usize];
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![T::zero(); cout * p];
    gemm(cout, kk, p, filt.data(), &cols, &mut out);
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_exact_mut(p).zip(b.data()) {
            for v in row {
                *v += bv;
            }
        }
    }
    Ok(out.into_tensor(&[cout, ho, wo]))
}

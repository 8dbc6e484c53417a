//! Sliding-window attention kernels.
//!
//! The fused kernels walk the map in square output tiles. For each tile they
//! gather the keys (or values) of the tile plus its `k−1` halo into a scratch
//! buffer sized by the tile alone, then reduce every window slot straight from
//! that buffer. The unfolded `[heads, H·W, k², d]` tensor is never built; the
//! naive kernels build it and serve as the oracle. Both reduce each window
//! in the same fixed slot order with an `f64` accumulator, so their outputs
//! are bit-identical.

use std::str::FromStr;
use std::time::Instant;

use crate::error::{config_err, shape_err, Error, Result};
use crate::pfa::{build_geometry, WindowGeometry};
use crate::tensor::{counter, softmax_row, IntoTensor, Scalar, Tensor};

pub const DEFAULT_TILE: usize = 8;

pub const BENCH_CSV_HEADER: &str = "case,h,w,c,heads,k,iters,ns_per_iter,scratch_bytes";

const WARMUP_ITERS: usize = 3;

fn dot64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x.as_f64() * y.as_f64())
}

/// Checks `[heads, H, W, last]` against the geometry; returns `heads`.
fn check_map<T>(t: &Tensor<T>, geom: &WindowGeometry, last: usize, what: &str) -> Result<usize>
where
    T: Clone,
{
    match t.dims()[..] {
        [heads, h, w, l] if h == geom.h && w == geom.w && l == last => Ok(heads),
        _ => Err(shape_err!(
            "{what} {:?} does not match [heads, {}, {}, {last}]",
            t.dims(),
            geom.h,
            geom.w
        )),
    }
}

fn check_qkv<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, geom: &WindowGeometry) -> Result<(usize, usize)> {
    let d = *a.dims().last().unwrap_or(&0);
    let heads = check_map(a, geom, d, "query map")?;
    if b.dims() != a.dims() {
        return Err(shape_err!("key/value map {:?} does not match {:?}", b.dims(), a.dims()));
    }
    Ok((heads, d))
}

/// Per-call scratch of the fused kernels, reused across heads and tiles.
#[derive(Debug)]
pub struct KernelWorkspace<T> {
    tile: usize,
    halo: Vec<T>,
    acc: Vec<f64>,
    peak_bytes: usize,
}

impl<T: Scalar> KernelWorkspace<T> {
    pub fn new(tile: usize) -> Result<Self> {
        if tile == 0 {
            return Err(config_err!("tile extent must be positive"));
        }
        Ok(KernelWorkspace { tile, halo: Vec::new(), acc: Vec::new(), peak_bytes: 0 })
    }

    pub fn tile(&self) -> usize {
        self.tile
    }

    /// High-water mark of scratch bytes held so far.
    pub fn peak_scratch_bytes(&self) -> usize {
        self.peak_bytes
    }

    fn reserve(&mut self, k: usize, d: usize) {
        let side = self.tile + k - 1;
        self.halo.resize(side * side * d, T::zero());
        self.acc.resize(d, 0.0);
        let bytes = self.halo.len() * std::mem::size_of::<T>() + self.acc.len() * std::mem::size_of::<f64>();
        self.peak_bytes = self.peak_bytes.max(bytes);
    }

    /// Copies the `(th+k−1)×(tw+k−1)` neighbourhood of a tile into the halo
    /// buffer, zero outside the map. Returns the gathered row width.
    fn gather(&mut self, src: &[T], geom: &WindowGeometry, d: usize, ty: usize, tx: usize, th: usize, tw: usize) -> usize {
        let r = (geom.k / 2) as isize;
        let (gh, gw) = (th + geom.k - 1, tw + geom.k - 1);
        for gy in 0..gh {
            let y = (ty + gy) as isize - r;
            for gx in 0..gw {
                let x = (tx + gx) as isize - r;
                let dst = &mut self.halo[(gy * gw + gx) * d..][..d];
                if y >= 0 && y < geom.h as isize && x >= 0 && x < geom.w as isize {
                    dst.copy_from_slice(&src[(y as usize * geom.w + x as usize) * d..][..d]);
                } else {
                    dst.fill(T::zero());
                }
            }
        }
        gw
    }

    fn tiles(&self, geom: &WindowGeometry) -> Vec<(usize, usize, usize, usize)> {
        let t = self.tile;
        let mut out = Vec::new();
        for ty in (0..geom.h).step_by(t) {
            for tx in (0..geom.w).step_by(t) {
                out.push((ty, tx, t.min(geom.h - ty), t.min(geom.w - tx)));
            }
        }
        out
    }

    /// `logits[h, i, j, s] = ⟨q[h, i, j], k[slot s of (i, j)]⟩`, sentinel on
    /// masked slots.
    pub fn qk(&mut self, q: &Tensor<T>, k: &Tensor<T>, geom: &WindowGeometry) -> Result<Tensor<T>> {
        let (heads, d) = check_qkv(q, k, geom)?;
        let (n, kw, slots) = (geom.pixels(), geom.k, geom.slots());
        self.reserve(kw, d);
        counter::add((heads * n * slots * d) as u64);
        let mut out = vec![T::zero(); heads * n * slots];
        for hd in 0..heads {
            let qh = &q.data()[hd * n * d..][..n * d];
            let kh = &k.data()[hd * n * d..][..n * d];
            for (ty, tx, th, tw) in self.tiles(geom) {
                let gw = self.gather(kh, geom, d, ty, tx, th, tw);
                for py in 0..th {
                    for px in 0..tw {
                        let p = (ty + py) * geom.w + tx + px;
                        let qv = &qh[p * d..][..d];
                        let orow = &mut out[(hd * n + p) * slots..][..slots];
                        for (s, (o, &m)) in orow.iter_mut().zip(geom.mask_row(p)).enumerate() {
                            *o = if m {
                                T::sentinel()
                            } else {
                                let g = (py + s / kw) * gw + px + s % kw;
                                T::from_f64(dot64(qv, &self.halo[g * d..][..d]))
                            };
                        }
                    }
                }
            }
        }
        Ok(out.into_tensor(&[heads, geom.h, geom.w, slots]))
    }

    /// `out[h, i, j] = Σ_s attn[h, i, j, s] · v[slot s of (i, j)]`; masked
    /// slots are skipped.
    pub fn av(&mut self, attn: &Tensor<T>, v: &Tensor<T>, geom: &WindowGeometry) -> Result<Tensor<T>> {
        let d = *v.dims().last().unwrap_or(&0);
        let heads = check_map(v, geom, d, "value map")?;
        if check_map(attn, geom, geom.slots(), "attention")? != heads {
            return Err(shape_err!("attention {:?} and values {:?} disagree on heads", attn.dims(), v.dims()));
        }
        let (n, kw, slots) = (geom.pixels(), geom.k, geom.slots());
        self.reserve(kw, d);
        counter::add((heads * n * slots * d) as u64);
        let mut out = vec![T::zero(); heads * n * d];
        for hd in 0..heads {
            let vh = &v.data()[hd * n * d..][..n * d];
            for (ty, tx, th, tw) in self.tiles(geom) {
                let gw = self.gather(vh, geom, d, ty, tx, th, tw);
                for py in 0..th {
                    for px in 0..tw {
                        let p = (ty + py) * geom.w + tx + px;
                        let arow = &attn.data()[(hd * n + p) * slots..][..slots];
                        self.acc.fill(0.0);
                        for (s, (&a, &m)) in arow.iter().zip(geom.mask_row(p)).enumerate() {
                            if m {
                                continue;
                            }
                            let g = (py + s / kw) * gw + px + s % kw;
                            let a = a.as_f64();
                            for (acc, &x) in self.acc.iter_mut().zip(&self.halo[g * d..][..d]) {
                                *acc += a * x.as_f64();
                            }
                        }
                        for (o, &acc) in out[(hd * n + p) * d..][..d].iter_mut().zip(&self.acc) {
                            *o = T::from_f64(acc);
                        }
                    }
                }
            }
        }
        Ok(out.into_tensor(v.dims()))
    }
}

/// Fused window similarity with the default tile.
pub fn fused_window_qk<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, geom: &WindowGeometry) -> Result<Tensor<T>> {
    KernelWorkspace::new(DEFAULT_TILE)?.qk(q, k, geom)
}

/// Fused window aggregation with the default tile.
pub fn fused_window_av<T: Scalar>(attn: &Tensor<T>, v: &Tensor<T>, geom: &WindowGeometry) -> Result<Tensor<T>> {
    KernelWorkspace::new(DEFAULT_TILE)?.av(attn, v, geom)
}

/// Materializes `[heads, H·W, k², d]` with zeros in masked slots.
fn unfold<T: Scalar>(src: &[T], heads: usize, d: usize, geom: &WindowGeometry) -> Vec<T> {
    let (n, slots) = (geom.pixels(), geom.slots());
    let mut out = vec![T::zero(); heads * n * slots * d];
    for hd in 0..heads {
        for p in 0..n {
            for s in 0..slots {
                if let Some(nb) = geom.neighbor(p, s) {
                    out[((hd * n + p) * slots + s) * d..][..d].copy_from_slice(&src[(hd * n + nb) * d..][..d]);
                }
            }
        }
    }
    out
}

/// Bytes of the unfolded tensor the naive kernels allocate.
pub fn naive_scratch_bytes<T: Scalar>(heads: usize, d: usize, geom: &WindowGeometry) -> usize {
    heads * geom.pixels() * geom.slots() * d * std::mem::size_of::<T>()
}

pub fn naive_unfold_qk<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, geom: &WindowGeometry) -> Result<Tensor<T>> {
    let (heads, d) = check_qkv(q, k, geom)?;
    let (n, slots) = (geom.pixels(), geom.slots());
    counter::add((heads * n * slots * d) as u64);
    let unfolded = unfold(k.data(), heads, d, geom);
    let mut out = vec![T::zero(); heads * n * slots];
    for hd in 0..heads {
        for p in 0..n {
            let qv = &q.data()[(hd * n + p) * d..][..d];
            for s in 0..slots {
                let i = (hd * n + p) * slots + s;
                out[i] = if geom.mask_row(p)[s] {
                    T::sentinel()
                } else {
                    T::from_f64(dot64(qv, &unfolded[i * d..][..d]))
                };
            }
        }
    }
    Ok(out.into_tensor(&[heads, geom.h, geom.w, slots]))
}

pub fn naive_unfold_av<T: Scalar>(attn: &Tensor<T>, v: &Tensor<T>, geom: &WindowGeometry) -> Result<Tensor<T>> {
    let d = *v.dims().last().unwrap_or(&0);
    let heads = check_map(v, geom, d, "value map")?;
    if check_map(attn, geom, geom.slots(), "attention")? != heads {
        return Err(shape_err!("attention {:?} and values {:?} disagree on heads", attn.dims(), v.dims()));
    }
    let (n, slots) = (geom.pixels(), geom.slots());
    counter::add((heads * n * slots * d) as u64);
    let unfolded = unfold(v.data(), heads, d, geom);
    let mut out = vec![T::zero(); heads * n * d];
    let mut acc = vec![0.0f64; d];
    for hd in 0..heads {
        for p in 0..n {
            acc.fill(0.0);
            for s in 0..slots {
                if geom.mask_row(p)[s] {
                    continue;
                }
                let i = (hd * n + p) * slots + s;
                let a = attn.data()[i].as_f64();
                for (acc, &x) in acc.iter_mut().zip(&unfolded[i * d..][..d]) {
                    *acc += a * x.as_f64();
                }
            }
            for (o, &a) in out[(hd * n + p) * d..][..d].iter_mut().zip(&acc) {
                *o = T::from_f64(a);
            }
        }
    }
    Ok(out.into_tensor(v.dims()))
}

/// Gradients of `L = Σ g_logits·qk(q, k) + Σ g_out·av(attn, v)` with respect
/// to each kernel input. Masked logit slots carry no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dattn: Tensor<T>,
}

/// Backward pass of the two fused kernels. Every gradient is written by
/// gathering over the slots that touch it, so no output is scattered to.
#[allow(clippy::too_many_arguments)]
pub fn fused_window_backward<T: Scalar>(
    g_logits: &Tensor<T>,
    g_out: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    attn: &Tensor<T>,
    geom: &WindowGeometry,
) -> Result<WindowGrads<T>> {
    let (heads, d) = check_qkv(q, k, geom)?;
    check_qkv(q, v, geom)?;
    check_qkv(q, g_out, geom)?;
    for (t, what) in [(g_logits, "logit gradient"), (attn, "attention")] {
        if check_map(t, geom, geom.slots(), what)? != heads {
            return Err(shape_err!("{what} {:?} disagrees on heads", t.dims()));
        }
    }
    let (n, slots, kw) = (geom.pixels(), geom.slots(), geom.k);
    let r = (kw / 2) as isize;
    let vec_at = |t: &Tensor<T>, hd: usize, p: usize| -> Vec<f64> {
        t.data()[(hd * n + p) * d..][..d].iter().map(|x| x.as_f64()).collect()
    };
    let slot_at = |t: &Tensor<T>, hd: usize, p: usize, s: usize| t.data()[(hd * n + p) * slots + s].as_f64();
    // Pixel whose slot `s` lands on `p`, if any.
    let source = |p: usize, s: usize| -> Option<usize> {
        let y = (p / geom.w) as isize - (s / kw) as isize + r;
        let x = (p % geom.w) as isize - (s % kw) as isize + r;
        (y >= 0 && y < geom.h as isize && x >= 0 && x < geom.w as isize).then(|| y as usize * geom.w + x as usize)
    };

    let mut dq = Vec::with_capacity(heads * n * d);
    let mut dk = Vec::with_capacity(heads * n * d);
    let mut dv = Vec::with_capacity(heads * n * d);
    let mut dattn = Vec::with_capacity(heads * n * slots);
    for hd in 0..heads {
        for p in 0..n {
            let mut gq = vec![0.0; d];
            let mut gk = vec![0.0; d];
            let mut gv = vec![0.0; d];
            let go = vec_at(g_out, hd, p);
            for s in 0..slots {
                match geom.neighbor(p, s) {
                    Some(nb) => {
                        let gl = slot_at(g_logits, hd, p, s);
                        let kv = vec_at(k, hd, nb);
                        gq.iter_mut().zip(&kv).for_each(|(g, &x)| *g += gl * x);
                        let vv = vec_at(v, hd, nb);
                        dattn.push(T::from_f64(go.iter().zip(&vv).fold(0.0, |a, (&x, &y)| a + x * y)));
                    }
                    None => dattn.push(T::zero()),
                }
                if let Some(src) = source(p, s) {
                    let gl = slot_at(g_logits, hd, src, s);
                    let qv = vec_at(q, hd, src);
                    gk.iter_mut().zip(&qv).for_each(|(g, &x)| *g += gl * x);
                    let a = slot_at(attn, hd, src, s);
                    let gos = vec_at(g_out, hd, src);
                    gv.iter_mut().zip(&gos).for_each(|(g, &x)| *g += a * x);
                }
            }
            dq.extend(gq.into_iter().map(T::from_f64));
            dk.extend(gk.into_iter().map(T::from_f64));
            dv.extend(gv.into_iter().map(T::from_f64));
        }
    }
    Ok(WindowGrads {
        dq: dq.into_tensor(q.dims()),
        dk: dk.into_tensor(q.dims()),
        dv: dv.into_tensor(q.dims()),
        dattn: dattn.into_tensor(attn.dims()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchCase {
    Fused,
    Naive,
}

impl BenchCase {
    pub fn name(self) -> &'static str {
        match self {
            BenchCase::Fused => "fused",
            BenchCase::Naive => "naive",
        }
    }
}

impl FromStr for BenchCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(BenchCase::Fused),
            "naive" => Ok(BenchCase::Naive),
            _ => Err(config_err!("unknown bench case `{s}` (expected fused or naive)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub ns_per_iter: f64,
    pub peak_scratch_bytes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub heads: usize,
    pub k: usize,
}

impl BenchShape {
    pub fn csv_row(&self, case: BenchCase, iters: usize, r: &BenchResult) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.0},{}",
            case.name(),
            self.h,
            self.w,
            self.c,
            self.heads,
            self.k,
            iters,
            r.ns_per_iter,
            r.peak_scratch_bytes
        )
    }
}

/// Times one window-attention step (similarity, masked softmax, aggregation)
/// in `f32` and reports the median per-iteration time after warm-up.
pub fn bench(case: BenchCase, shape: BenchShape, iters: usize, tile: usize) -> Result<BenchResult> {
    let BenchShape { h, w, c, heads, k } = shape;
    if heads == 0 || c % heads != 0 {
        return Err(config_err!("channels {c} not divisible by heads {heads}"));
    }
    if iters == 0 {
        return Err(config_err!("iters must be positive"));
    }
    let geom = build_geometry(h, w, k, 1, 1)?;
    let d = c / heads;
    let mut rng = crate::oracle::rng(0);
    let dims = [heads, h, w, d];
    let q = crate::oracle::rand_tensor(&mut rng, &dims).cast::<f32>();
    let kt = crate::oracle::rand_tensor(&mut rng, &dims).cast::<f32>();
    let v = crate::oracle::rand_tensor(&mut rng, &dims).cast::<f32>();
    let mut ws = KernelWorkspace::<f32>::new(tile)?;
    let mut naive_peak = 0;

    let mut step = |ws: &mut KernelWorkspace<f32>| -> Result<Tensor<f32>> {
        let logits = match case {
            BenchCase::Fused => ws.qk(&q, &kt, &geom)?,
            BenchCase::Naive => {
                naive_peak = naive_scratch_bytes::<f32>(heads, d, &geom);
                naive_unfold_qk(&q, &kt, &geom)?
            }
        };
        let slots = geom.slots();
        let mut attn = logits.into_data();
        for (i, row) in attn.chunks_exact_mut(slots).enumerate() {
            softmax_row(row, Some(geom.mask_row(i % geom.pixels())))?;
        }
        let attn = attn.into_tensor(&[heads, h, w, slots]);
        match case {
            BenchCase::Fused => ws.av(&attn, &v, &geom),
            BenchCase::Naive => naive_unfold_av(&attn, &v, &geom),
        }
    };

    for _ in 0..WARMUP_ITERS {
        std::hint::black_box(step(&mut ws)?);
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        std::hint::black_box(step(&mut ws)?);
        times.push(t0.elapsed().as_nanos() as f64);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) };
    let peak = match case {
        BenchCase::Fused => ws.peak_scratch_bytes(),
        BenchCase::Naive => naive_peak,
    };
    Ok(BenchResult { ns_per_iter: median, peak_scratch_bytes: peak })
}

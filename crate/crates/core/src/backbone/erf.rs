//! Effective receptive field by central finite differences.
//!
//! The probe is the channel sum of the output at the center pixel; the
//! saliency of an input pixel is `Σ_c |∂probe/∂x[c, i, j]|`, scaled so the
//! largest value is 1.

use super::config::Mode;
use super::model::Model;
use crate::attention::{aggregated_attention_forward, build_relative_coords, AggAttentionParams, RelativeCoords};
use crate::error::{config_err, shape_err, Result};
use crate::oracle::{random_agg_params, rng};
use crate::pfa::{build_geometry, WindowGeometry};
use crate::tensor::Tensor;

/// Inputs above this many pixels need `allow_large`.
pub const MAX_PIXELS: usize = 64 * 64;
pub const DEFAULT_STEP: f64 = 1e-3;
/// Channel width of the toy mixers.
pub const TOY_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErfOptions {
    pub step: f64,
    pub allow_large: bool,
}

impl Default for ErfOptions {
    fn default() -> Self {
        ErfOptions { step: DEFAULT_STEP, allow_large: false }
    }
}

fn probe(y: &Tensor<f64>) -> Result<f64> {
    let (c, h, w) = y.chw()?;
    let (ci, cj) = (h / 2, w / 2);
    Ok((0..c).map(|ch| y.data()[(ch * h + ci) * w + cj]).sum())
}

/// Saliency grid `[H, W]` of `f` around `image` (`[C, H, W]`).
pub fn erf_saliency(
    mut f: impl FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
    image: &Tensor<f64>,
    opts: ErfOptions,
) -> Result<Tensor<f64>> {
    let (c, h, w) = image.chw()?;
    if h * w > MAX_PIXELS && !opts.allow_large {
        return Err(config_err!("ERF input {h}x{w} exceeds the 64x64 guard; pass the override flag to run it anyway"));
    }
    if !(opts.step > 0.0) {
        return Err(config_err!("finite-difference step must be positive, got {}", opts.step));
    }
    let mut x = image.clone().into_data();
    let mut grid = vec![0.0; h * w];
    for ch in 0..c {
        for p in 0..h * w {
            let idx = ch * h * w + p;
            let orig = x[idx];
            x[idx] = orig + opts.step;
            let up = probe(&f(&Tensor::new(vec![c, h, w], x.clone())?)?)?;
            x[idx] = orig - opts.step;
            let down = probe(&f(&Tensor::new(vec![c, h, w], x.clone())?)?)?;
            x[idx] = orig;
            grid[p] += ((up - down) / (2.0 * opts.step)).abs();
        }
    }
    let max = grid.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        grid.iter_mut().for_each(|v| *v /= max);
    }
    Tensor::new(vec![h, w], grid)
}

/// Saliency of the center unit after stage `stage` (0-based).
pub fn model_erf(model: &Model<f64>, image: &Tensor<f64>, stage: usize, mode: Mode, opts: ErfOptions) -> Result<Tensor<f64>> {
    erf_saliency(|x| model.stage_features(x, mode, stage), image, opts)
}

/// Single-mixer models small enough for exhaustive finite differences.
#[derive(Clone, Debug)]
pub enum ErfToy {
    Identity,
    /// One aggregated-attention mixer, 3×3 window, 1×1 pooled grid.
    Aggregated { params: AggAttentionParams<f64>, geom: WindowGeometry, coords: RelativeCoords },
}

impl ErfToy {
    pub fn aggregated(h: usize, w: usize, seed: u64) -> Result<Self> {
        let params = random_agg_params(&mut rng(seed), 1, TOY_CHANNELS, 3);
        let geom = build_geometry(h, w, 3, 1, 1)?;
        let coords = build_relative_coords(h, w, 1, 1, h, w)?;
        Ok(ErfToy::Aggregated { params, geom, coords })
    }

    pub fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        match self {
            ErfToy::Identity => Ok(x.clone()),
            ErfToy::Aggregated { params, geom, coords } => {
                let (_, h, w) = x.chw()?;
                if (h, w) != (geom.h, geom.w) {
                    return Err(shape_err!("toy was built for {}x{}, got {h}x{w}", geom.h, geom.w));
                }
                aggregated_attention_forward(x, params, geom, coords)
            }
        }
    }
}

/// Plain-text grid, one row per line, four decimals.
pub fn grid_to_text(grid: &Tensor<f64>) -> String {
    let w = grid.dims()[1];
    grid.data()
        .chunks_exact(w)
        .map(|row| row.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

/// Binary 8-bit PGM (P5) with values in `[0, 1]` mapped to `0..=255`.
pub fn grid_to_pgm(grid: &Tensor<f64>) -> Vec<u8> {
    let (h, w) = (grid.dims()[0], grid.dims()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(grid.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::rand_tensor;

    #[test]
    fn identity_is_a_delta() {
        let img = rand_tensor(&mut rng(0), &[TOY_CHANNELS, 9, 7]);
        let g = erf_saliency(|x| ErfToy::Identity.forward(x), &img, ErfOptions::default()).unwrap();
        for (p, &v) in g.data().iter().enumerate() {
            let expect = if p == 4 * 7 + 3 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-9, "pixel {p}: {v}");
        }
    }

    #[test]
    fn aggregated_support_and_peak() {
        let (h, w) = (9, 9);
        let toy = ErfToy::aggregated(h, w, 5).unwrap();
        let img = rand_tensor(&mut rng(1), &[TOY_CHANNELS, h, w]);
        let g = erf_saliency(|x| toy.forward(x), &img, ErfOptions::default()).unwrap();
        assert!(g.data().iter().all(|&v| v > 0.0));
        let argmax = g.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let (i, j) = (argmax / w, argmax % w);
        assert!(i.abs_diff(h / 2) <= 1 && j.abs_diff(w / 2) <= 1, "peak at ({i}, {j})");

        let half = erf_saliency(|x| toy.forward(x), &img, ErfOptions { step: DEFAULT_STEP / 2.0, ..Default::default() }).unwrap();
        let num: f64 = g.data().iter().zip(half.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = g.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den < 0.05);
    }

    #[test]
    fn guard() {
        let img = Tensor::<f64>::zeros(&[1, 65, 64]).unwrap();
        assert!(erf_saliency(|x| Ok(x.clone()), &img, ErfOptions::default()).is_err());
        let pgm = grid_to_pgm(&Tensor::from_f64_slice(&[1, 2], &[0.0, 1.0]).unwrap());
        assert_eq!(pgm, b"P5\n2 1\n255\n\x00\xff");
    }
}

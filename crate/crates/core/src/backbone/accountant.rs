//! Closed-form parameter and cost accounting.
//!
//! MAC counts here are exact: they equal what the instrumented kernels
//! record on a forward pass at the same resolution and mode. Elementwise
//! work (biases, normalization, activations, softmax) is tallied separately
//! and only enters the two-FLOPs-per-MAC convention.

use std::fmt;
use std::str::FromStr;

use super::config::{MixerKind, Mode, ModelConfig, HEAD_DIM};
use crate::attention::{unique_offset_count, CPB_HIDDEN};
use crate::conv_glu::hidden_dim;
use crate::error::{config_err, shape_err, Error, Result};

/// FLOPs charged per element for softmax, GELU and LayerNorm.
pub const NONLINEAR_FLOPS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MacConvention {
    /// One multiply-accumulate is one FLOP; elementwise work is free.
    #[default]
    Mac1,
    /// One multiply-accumulate is two FLOPs, plus elementwise work.
    Mac2,
}

impl FromStr for MacConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mac1" => Ok(MacConvention::Mac1),
            "mac2" => Ok(MacConvention::Mac2),
            _ => Err(config_err!("unknown MAC convention `{s}` (expected mac1 or mac2)")),
        }
    }
}

impl fmt::Display for MacConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MacConvention::Mac1 => "mac1",
            MacConvention::Mac2 => "mac2",
        })
    }
}

/// Cost of one module summed over every block of its stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCost {
    /// 1-based stage, 0 for the classifier head.
    pub stage: usize,
    pub module: &'static str,
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

impl ModuleCost {
    pub fn flops(&self, conv: MacConvention) -> u64 {
        match conv {
            MacConvention::Mac1 => self.macs,
            MacConvention::Mac2 => 2 * self.macs + self.elementwise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub h: usize,
    pub w: usize,
    pub mode: Mode,
    pub modules: Vec<ModuleCost>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.modules.iter().map(|m| m.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.modules.iter().map(|m| m.macs).sum()
    }

    pub fn total_flops(&self, conv: MacConvention) -> u64 {
        self.modules.iter().map(|m| m.flops(conv)).sum()
    }

    /// `(stage, params, flops)` per stage, head last as stage 0.
    pub fn per_stage(&self, conv: MacConvention) -> Vec<(usize, u64, u64)> {
        let mut out: Vec<(usize, u64, u64)> = Vec::new();
        for m in &self.modules {
            match out.last_mut() {
                Some(last) if last.0 == m.stage => {
                    last.1 += m.params;
                    last.2 += m.flops(conv);
                }
                _ => out.push((m.stage, m.params, m.flops(conv))),
            }
        }
        out
    }
}

/// Pixel-focused attention MACs on an `h×w` map with `l` pooled tokens,
/// including the output projection.
pub fn pfa_flops(h: u64, w: u64, c: u64, k: u64, l: u64) -> u64 {
    let n = h * w;
    5 * n * c * c + 2 * l * c * c + 2 * n * l * c + 2 * n * k * k * c
}

/// Aggregated attention MACs: pixel-focused attention plus the positional
/// term, excluding the position-bias MLP.
pub fn aa_flops(h: u64, w: u64, c: u64, k: u64, l: u64) -> u64 {
    pfa_flops(h, w, c, k, l) + h * w * k * k * c
}

fn linear_params(inp: u64, out: u64) -> u64 {
    inp * out + out
}

/// Per-module costs of `config` on an `h×w` input.
pub fn count_flops(config: &ModelConfig, h: usize, w: usize, mode: Mode) -> Result<CostReport> {
    config.validate()?;
    let stride = config.total_stride();
    if h == 0 || w == 0 || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
        return Err(shape_err!("resolution {h}x{w} is not a positive multiple of {stride}"));
    }
    let f = NONLINEAR_FLOPS;
    let mut modules = Vec::new();
    let mut c_in = config.in_channels as u64;
    for (s, sc) in config.stages.iter().enumerate() {
        let stage = s + 1;
        let spec = config.embed_spec(s);
        let (fh, fw) = (h / config.stage_stride(s), w / config.stage_stride(s));
        let n = (fh * fw) as u64;
        let c = sc.channels as u64;
        let heads = sc.heads() as u64;
        let blocks = sc.blocks as u64;
        let kk = (spec.kernel * spec.kernel) as u64;
        modules.push(ModuleCost {
            stage,
            module: "patch_embed",
            params: c * c_in * kk + c + 2 * c,
            macs: c * c_in * kk * n,
            elementwise: n * c + f * n * c,
        });
        let (params, macs, ew) = match sc.mixer {
            MixerKind::Aggregated => {
                let k = sc.window.expect("validated") as u64;
                let slots = k * k;
                let (ph, pw) = config.pool_extent(s, h, w, fh, fw, mode).expect("aggregated stage has a pool");
                let l = (ph * pw) as u64;
                let train = config.train_extent(s);
                let u = unique_offset_count(fh, fw, ph, pw, train, train) as u64;
                let hd = HEAD_DIM as u64;
                let qe = if config.query_embedding { heads * hd } else { 0 };
                let pos = if config.positional_tokens { heads * hd * slots } else { 0 };
                let params = 5 * linear_params(c, c)
                    + 2 * c
                    + heads * slots
                    + qe
                    + pos
                    + heads
                    + linear_params(2, CPB_HIDDEN as u64)
                    + linear_params(CPB_HIDDEN as u64, heads);
                let base = if config.positional_tokens { aa_flops(fh as u64, fw as u64, c, k, l) } else { pfa_flops(fh as u64, fw as u64, c, k, l) };
                let cpb = u * (2 * CPB_HIDDEN as u64 + CPB_HIDDEN as u64 * heads);
                let cols = heads * n * (slots + l);
                let ew = 5 * n * c + 2 * l * c
                    + f * n * c
                    + n * c
                    + f * l * c
                    + 3 * (2 * n + l) * c
                    + if config.query_embedding { n * c } else { 0 }
                    + 2 * cols
                    + f * cols
                    + u * (2 * CPB_HIDDEN as u64 + heads)
                    + heads * n * l;
                (params, base + cpb, ew)
            }
            MixerKind::Mhsa => {
                let qe = if config.query_embedding { c } else { 0 };
                let params = 4 * linear_params(c, c) + qe + heads;
                let macs = 4 * n * c * c + 2 * n * n * c;
                let ew = 4 * n * c + 6 * n * c + if config.query_embedding { n * c } else { 0 } + (1 + f) * heads * n * n;
                (params, macs, ew)
            }
        };
        modules.push(ModuleCost { stage, module: "attention", params: params * blocks, macs: macs * blocks, elementwise: ew * blocks });
        let hid = hidden_dim(sc.channels, sc.mlp_ratio) as u64;
        modules.push(ModuleCost {
            stage,
            module: "conv_glu",
            params: (2 * linear_params(c, hid) + 10 * hid + linear_params(hid, c)) * blocks,
            macs: (3 * n * c * hid + 9 * n * hid) * blocks,
            elementwise: (3 * n * hid + n * c + f * n * hid + n * hid) * blocks,
        });
        modules.push(ModuleCost {
            stage,
            module: "norms",
            params: 4 * c * blocks,
            macs: 0,
            elementwise: (2 * f * n * c + 2 * n * c) * blocks,
        });
        c_in = c;
    }
    let classes = config.num_classes as u64;
    let last = config.stages.len() - 1;
    let n = ((h / config.stage_stride(last)) * (w / config.stage_stride(last))) as u64;
    modules.push(ModuleCost {
        stage: 0,
        module: "head",
        params: 2 * c_in + linear_params(c_in, classes),
        macs: c_in * classes,
        elementwise: f * n * c_in + n * c_in + classes,
    });
    Ok(CostReport { h, w, mode, modules })
}

/// Parameter count, independent of resolution.
pub fn count_params(config: &ModelConfig) -> Result<u64> {
    let t = config.train_resolution;
    let r = t.div_ceil(config.total_stride()) * config.total_stride();
    Ok(count_flops(config, r, r, Mode::Linear)?.total_params())
}

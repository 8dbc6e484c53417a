//! Convolutional GLU channel mixer: a gated linear unit whose gate passes
//! through a 3×3 depthwise convolution, so each token is gated by its
//! neighbourhood.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{depthwise_conv3x3, gelu, tokens_to_chw, LinearParams, Scalar, Tensor};

/// Where the depthwise convolution sits relative to the gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum GluVariant {
    /// `value ⊙ GELU(DW(gate))`
    #[default]
    ConvGlu,
    /// `value ⊙ DW(GELU(gate))`
    Type1,
    /// `DW(value) ⊙ GELU(gate)`
    Type2,
    /// `DW(value ⊙ GELU(gate))`
    Type3,
}

impl GluVariant {
    pub const ALL: [GluVariant; 4] = [GluVariant::ConvGlu, GluVariant::Type1, GluVariant::Type2, GluVariant::Type3];
}

impl FromStr for GluVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "convglu" => Ok(GluVariant::ConvGlu),
            "type1" => Ok(GluVariant::Type1),
            "type2" => Ok(GluVariant::Type2),
            "type3" => Ok(GluVariant::Type3),
            _ => Err(config_err!("unknown GLU variant `{s}` (expected convglu, type1, type2 or type3)")),
        }
    }
}

impl fmt::Display for GluVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GluVariant::ConvGlu => "convglu",
            GluVariant::Type1 => "type1",
            GluVariant::Type2 => "type2",
            GluVariant::Type3 => "type3",
        })
    }
}

/// Hidden width `round(2/3·R·C)`, at least 1.
pub fn hidden_dim(channels: usize, ratio: usize) -> usize {
    ((2 * ratio * channels) as f64 / 3.0).round().max(1.0) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGluParams<T> {
    pub fc_value: LinearParams<T>,
    pub fc_gate: LinearParams<T>,
    /// `[hidden, 3, 3]`
    pub dw_weight: Tensor<T>,
    /// `[hidden]`
    pub dw_bias: Tensor<T>,
    pub fc_out: LinearParams<T>,
    pub variant: GluVariant,
}

impl<T: Scalar> ConvGluParams<T> {
    pub fn cast<U: Scalar>(&self) -> ConvGluParams<U> {
        ConvGluParams {
            fc_value: self.fc_value.cast(),
            fc_gate: self.fc_gate.cast(),
            dw_weight: self.dw_weight.cast(),
            dw_bias: self.dw_bias.cast(),
            fc_out: self.fc_out.cast(),
            variant: self.variant,
        }
    }

    pub fn hidden(&self) -> usize {
        self.fc_value.out_features()
    }

    fn check(&self, c: usize) -> Result<()> {
        let hid = self.hidden();
        let ok = self.fc_value.in_features() == c
            && self.fc_gate.in_features() == c
            && self.fc_gate.out_features() == hid
            && self.fc_out.in_features() == hid
            && self.fc_out.out_features() == c;
        if !ok {
            return Err(shape_err!("channel mixer weights do not form {c} -> {hid} -> {c}"));
        }
        Ok(())
    }
}

fn dw_tokens<T: Scalar>(x: &Tensor<T>, h: usize, w: usize, p: &ConvGluParams<T>) -> Result<Tensor<T>> {
    depthwise_conv3x3(&tokens_to_chw(x, h, w)?, &p.dw_weight, &p.dw_bias)?.chw_to_tokens()
}

fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x * y)
}

/// Token-level forward on `[H·W, C]` rows of an `h×w` map.
pub(crate) fn conv_glu_tokens<T: Scalar>(x: &Tensor<T>, h: usize, w: usize, p: &ConvGluParams<T>) -> Result<Tensor<T>> {
    p.check(x.dims()[1])?;
    let value = p.fc_value.forward(x)?;
    let gate = p.fc_gate.forward(x)?;
    let mixed = match p.variant {
        GluVariant::ConvGlu => hadamard(&value, &gelu(&dw_tokens(&gate, h, w, p)?))?,
        GluVariant::Type1 => hadamard(&value, &dw_tokens(&gelu(&gate), h, w, p)?)?,
        GluVariant::Type2 => hadamard(&dw_tokens(&value, h, w, p)?, &gelu(&gate))?,
        GluVariant::Type3 => dw_tokens(&hadamard(&value, &gelu(&gate))?, h, w, p)?,
    };
    p.fc_out.forward(&mixed)
}

/// Channel mixer on a `[C, H, W]` map, including the output projection.
pub fn conv_glu_forward<T: Scalar>(x: &Tensor<T>, p: &ConvGluParams<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    p.check(c)?;
    tokens_to_chw(&conv_glu_tokens(&x.chw_to_tokens()?, h, w, p)?, h, w)
}

/// `2RHWC² + ⅔RHWCk²`, rounded to the nearest integer.
pub fn conv_glu_flops(c: u64, h: u64, w: u64, r: u64, k: u64) -> u64 {
    let hw = h * w;
    2 * r * hw * c * c + (2 * r * hw * c * k * k + 1) / 3
}

/// `2RHWC² + RHWCk²`, the same channel mixer with an ordinary MLP and a
/// depthwise convolution over the full expanded width.
pub fn conv_ffn_flops(c: u64, h: u64, w: u64, r: u64, k: u64) -> u64 {
    let hw = h * w;
    2 * r * hw * c * c + r * hw * c * k * k
}

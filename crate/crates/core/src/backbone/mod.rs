//! The four-stage hierarchical model: configuration, weights, forward pass,
//! cost accounting and receptive-field probing.

pub mod accountant;
pub mod archive;
pub mod config;
pub mod erf;
pub mod model;

pub use accountant::{aa_flops, count_flops, count_params, pfa_flops, CostReport, MacConvention, ModuleCost};
pub use archive::{AnyTensor, Archive};
pub use config::{MixerKind, Mode, ModelConfig, PoolMode, StageConfig, HEAD_DIM};
pub use model::{Block, Mixer, Model, PatchEmbed, Stage};

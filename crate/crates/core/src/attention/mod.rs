//! Attention variants: softmax, single Gaussian, mixture of Gaussian keys,
//! linear, and mixture of linear keys.

pub mod config;
pub mod kernels;
pub mod multi_head;
pub mod params;

pub use config::{default_sigma2, AttentionConfig, EStep, Kernel, KeyMode, Variant};
pub use kernels::{
    gaussian_attention, linear_attention, linearized_scores, make_keys, mgk_attention, mlk_attention,
    softmax_attention, AttentionOutput,
};
pub use multi_head::{multi_head, MultiHeadOutput};
pub use params::{MixtureKeyParams, MultiHeadParams, ParamGroup, ProjectionParams};

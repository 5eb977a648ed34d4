//! Summary-token attention at desk scale.
//!
//! Text is cut into chunks of `k` tokens and every complete chunk is followed
//! by a summary token. Text queries see the raw text of the `C` most recent
//! chunks plus the summaries of everything older; summary queries see only
//! their own chunk. This crate provides the masks, a dense and a block-sparse
//! attention engine, the decode-time summary KV cache, closed-form cache cost
//! formulas, a small trainable decoder and the teacher/student warm-up losses.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`).

pub mod attention;
pub mod error;
pub mod kvcache;
pub mod masking;
pub mod memmodel;
pub mod numerics;
pub mod recipes;
pub mod scalar;
pub mod toymodel;

pub use error::{KsaError, Result};
pub use masking::{augment, AugmentedSequence, KsaConfig, Role, VisibilityMask};
pub use numerics::{RopeConfig, Tensor};
pub use scalar::{DType, Scalar};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type AttentionInputsF32 = attention::AttentionInputs<f32>;
pub type AttentionInputsF64 = attention::AttentionInputs<f64>;
pub type KsaKvCacheF32 = kvcache::KsaKvCache<f32>;
pub type KsaKvCacheF64 = kvcache::KsaKvCache<f64>;
pub type ParamsF32 = toymodel::Params<f32>;
pub type ParamsF64 = toymodel::Params<f64>;
/// Exact rational arithmetic for the cache cost model.
pub type ExactCost = num_rational::Ratio<i128>;

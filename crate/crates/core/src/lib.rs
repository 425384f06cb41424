//! Three-stage hierarchical autoregressive modelling of dual-rate audio codes.
//!
//! Semantic tokens at 50 Hz condition a coarse and then a fine stage of
//! 75 Hz residual-VQ acoustic codes. The crate contains everything needed to
//! run that pipeline at desk scale:
//!
//! - [`graph`]: a small reverse-mode autodiff engine over dense `f64` tensors
//! - [`codec`]: synthetic paired signals, k-means and residual VQ tokenizers
//! - [`data`]: corpus generation, manifests, tokenizer fitting
//! - [`model`]: the decoder-only Transformer (RMSNorm, QK-norm attention with
//!   bucketed relative bias, GEGLU feed-forward, per-quantizer heads)
//! - [`stages`]: stage contracts, interleaving and sequence assembly
//! - [`train`]: teacher-forced training with guidance dropout and AdamW
//! - [`sample`]: guided autoregressive sampling and the full generation chain
//! - [`eval`]: Fréchet distance over toy embeddings and perplexity
//! - [`formats`]: token, frame and checkpoint files

pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod formats;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod sample;
pub mod stages;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{GradBuffer, Graph, ParamId, ParamStore, Var};
pub use tensor::Tensor;

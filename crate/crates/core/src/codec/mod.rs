//! Synthetic stand-in for the audio front end: paired signal generation,
//! noise augmentation, level-based filtering, k-means semantic tokens and
//! residual-VQ acoustic codes.

pub mod kmeans;
pub mod rvq;
pub mod signal;
pub mod tokens;

pub use kmeans::{kmeans_fit, kmeans_fit_with, quantize, Codebook, KmeansFit};
pub use rvq::{rvq_decode, rvq_encode, rvq_fit, RvqCodec, RvqFit};
pub use signal::{
    add_noise, extract_features, filter_clip, filter_levels, render_features, rms_db, synth_pair, ClipDecision,
    FeatureStream, Level, PairExample, RejectReason, SynthConfig, Waveform,
};
pub use tokens::{
    aligned_crop, draw_crop_window, split_coarse_fine, AlignedCrop, CodeGrid, CropWindow, TokenStream, ACOUSTIC_CODEBOOKS,
    HALF_CODEBOOKS,
};

/// Semantic token rate.
pub const SEMANTIC_RATE_HZ: u32 = 50;
/// Acoustic code rate.
pub const ACOUSTIC_RATE_HZ: u32 = 75;

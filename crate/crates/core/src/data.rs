//! Synthetic corpus generation, filtering, and the dual-rate tokenizers.

use serde::{Deserialize, Serialize};

use crate::codec::{
    add_noise, extract_features, filter_clip, kmeans_fit, quantize, rvq_encode, rvq_fit, split_coarse_fine,
    ClipDecision, Codebook, FeatureStream, PairExample, RejectReason, RvqCodec, SynthConfig, ACOUSTIC_RATE_HZ,
    SEMANTIC_RATE_HZ,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::stages::PairTokens;
use crate::tensor::Tensor;

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub duration_s: f64,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub pairs: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pairs: 8,
            duration_s: 2.0,
            seed: 0,
            synth: SynthConfig::default(),
        }
    }
}

pub fn pair_id(index: usize) -> String {
    format!("pair-{index:05}")
}

pub fn pair_seed(corpus_seed: u64, index: usize) -> u64 {
    rng::derive_seed(corpus_seed, &pair_id(index))
}

pub fn manifest_entry(id: String, pair: &PairExample, duration_s: f64) -> Result<ManifestEntry> {
    let reason = match filter_clip(&pair.vocal, &pair.instrumental)? {
        ClipDecision::Keep => None,
        ClipDecision::Reject(r) => Some(r),
    };
    Ok(ManifestEntry {
        id,
        seed: pair.seed,
        duration_s,
        kept: reason.is_none(),
        reject_reason: reason,
    })
}

/// Generate and filter `cfg.pairs` pairs, in index order.
pub fn synth_corpus(cfg: &CorpusConfig) -> Result<Vec<(ManifestEntry, PairExample)>> {
    cfg.synth.validate()?;
    let one = |i: usize| -> Result<(ManifestEntry, PairExample)> {
        let pair = crate::codec::synth_pair(pair_seed(cfg.seed, i), cfg.duration_s, &cfg.synth)?;
        Ok((manifest_entry(pair_id(i), &pair, cfg.duration_s)?, pair))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..cfg.pairs).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..cfg.pairs).map(one).collect()
    }
}

pub fn manifest_to_jsonl(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        s.push('\n');
    }
    s
}

pub fn manifest_from_jsonl(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format("manifest", format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub semantic_k: usize,
    pub acoustic_k: usize,
    pub rvq_stages: usize,
    pub kmeans_iters: usize,
    /// Standard deviation of the noise added to vocals before feature
    /// extraction; 0.01 is about −40 dB.
    pub noise_sigma: f64,
    /// Quantize instrumental semantics with the vocal codebook instead of a
    /// separately fitted one.
    pub shared_semantic_codebook: bool,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            semantic_k: 64,
            acoustic_k: 64,
            rvq_stages: 8,
            kmeans_iters: 50,
            noise_sigma: 0.01,
            shared_semantic_codebook: true,
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.semantic_k == 0 || self.acoustic_k == 0 || self.kmeans_iters == 0 {
            return Err(Error::invalid("codebook sizes and kmeans_iters must be positive"));
        }
        if self.semantic_k > u16::MAX as usize + 1 || self.acoustic_k > u16::MAX as usize + 1 {
            return Err(Error::invalid("codebook sizes must fit 16-bit ids"));
        }
        if self.rvq_stages != 8 {
            return Err(Error::invalid(format!(
                "the coarse/fine split needs 8 RVQ stages, got {}",
                self.rvq_stages
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizers {
    pub vocal_semantic: Codebook,
    /// `None` when instrumentals share the vocal codebook.
    pub instrumental_semantic: Option<Codebook>,
    pub acoustic: RvqCodec,
}

impl Tokenizers {
    pub fn instrumental_codebook(&self) -> &Codebook {
        self.instrumental_semantic.as_ref().unwrap_or(&self.vocal_semantic)
    }

    pub fn semantic_vocab(&self) -> usize {
        self.vocal_semantic.k.max(self.instrumental_codebook().k)
    }

    pub fn acoustic_vocab(&self) -> usize {
        self.acoustic.vocab()
    }
}

struct PairFeatures {
    vocal: FeatureStream,
    instrumental: FeatureStream,
    acoustic: FeatureStream,
}

fn pair_features(pair: &PairExample, cfg: &TokenizerConfig) -> Result<PairFeatures> {
    let dim = pair.vocal_features.dim();
    let noisy = add_noise(&pair.vocal, cfg.noise_sigma, rng::derive_seed(pair.seed, "vocal-noise"))?;
    Ok(PairFeatures {
        vocal: extract_features(&noisy, SEMANTIC_RATE_HZ, dim)?,
        instrumental: extract_features(&pair.instrumental, SEMANTIC_RATE_HZ, dim)?,
        acoustic: extract_features(&pair.instrumental, ACOUSTIC_RATE_HZ, dim)?,
    })
}

fn stack(streams: &[&FeatureStream]) -> Result<Tensor> {
    let dim = streams.first().map(|s| s.dim()).unwrap_or(0);
    let mut data = Vec::new();
    let mut rows = 0;
    for s in streams {
        if s.dim() != dim {
            return Err(Error::invalid("feature streams have different dimensions"));
        }
        rows += s.num_frames();
        data.extend_from_slice(s.frames.data());
    }
    Tensor::new(vec![rows, dim], data)
}

/// Fit the semantic k-means codebook(s) and the acoustic RVQ on a set of
/// (kept) pairs.
pub fn fit_tokenizers(pairs: &[PairExample], cfg: &TokenizerConfig) -> Result<Tokenizers> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to fit tokenizers on"));
    }
    let feats = pairs.iter().map(|p| pair_features(p, cfg)).collect::<Result<Vec<_>>>()?;
    let vocal = stack(&feats.iter().map(|f| &f.vocal).collect::<Vec<_>>())?;
    let instr = stack(&feats.iter().map(|f| &f.instrumental).collect::<Vec<_>>())?;
    let acoustic = stack(&feats.iter().map(|f| &f.acoustic).collect::<Vec<_>>())?;
    let iters = cfg.kmeans_iters;
    let (vocal_semantic, instrumental_semantic) = if cfg.shared_semantic_codebook {
        let both = Tensor::new(
            vec![vocal.shape()[0] + instr.shape()[0], vocal.shape()[1]],
            [vocal.data(), instr.data()].concat(),
        )?;
        (kmeans_fit(&both, cfg.semantic_k, iters, rng::derive_seed(cfg.seed, "semantic"))?.codebook, None)
    } else {
        (
            kmeans_fit(&vocal, cfg.semantic_k, iters, rng::derive_seed(cfg.seed, "semantic-vocal"))?.codebook,
            Some(kmeans_fit(&instr, cfg.semantic_k, iters, rng::derive_seed(cfg.seed, "semantic-instrumental"))?.codebook),
        )
    };
    let acoustic = rvq_fit(&acoustic, cfg.rvq_stages, cfg.acoustic_k, iters, rng::derive_seed(cfg.seed, "acoustic"))?.codec;
    Ok(Tokenizers {
        vocal_semantic,
        instrumental_semantic,
        acoustic,
    })
}

/// Vocal semantic tokens of a pair (noise-augmented).
pub fn tokenize_vocal(pair: &PairExample, tok: &Tokenizers, cfg: &TokenizerConfig) -> Result<crate::codec::TokenStream> {
    let dim = pair.vocal_features.dim();
    let noisy = add_noise(&pair.vocal, cfg.noise_sigma, rng::derive_seed(pair.seed, "vocal-noise"))?;
    quantize(&extract_features(&noisy, SEMANTIC_RATE_HZ, dim)?, &tok.vocal_semantic)
}

pub fn tokenize_pair(id: &str, pair: &PairExample, tok: &Tokenizers, cfg: &TokenizerConfig) -> Result<PairTokens> {
    let f = pair_features(pair, cfg)?;
    let mut vocal_semantic = quantize(&f.vocal, &tok.vocal_semantic)?;
    let mut instrumental_semantic = quantize(&f.instrumental, tok.instrumental_codebook())?;
    // Both streams carry the larger vocabulary when codebooks differ in size.
    vocal_semantic.vocab = tok.semantic_vocab();
    instrumental_semantic.vocab = tok.semantic_vocab();
    let grid = rvq_encode(&f.acoustic.frames, &tok.acoustic, ACOUSTIC_RATE_HZ)?;
    let (coarse, fine) = split_coarse_fine(&grid)?;
    Ok(PairTokens {
        id: id.to_string(),
        vocal_semantic,
        instrumental_semantic,
        coarse,
        fine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            pairs: 4,
            duration_s: 1.0,
            seed: 3,
            ..CorpusConfig::default()
        }
    }

    fn tok_cfg() -> TokenizerConfig {
        TokenizerConfig {
            semantic_k: 8,
            acoustic_k: 8,
            kmeans_iters: 10,
            ..TokenizerConfig::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_and_manifest_round_trips() {
        let a = synth_corpus(&small()).unwrap();
        let b = synth_corpus(&small()).unwrap();
        assert_eq!(a.len(), 4);
        let ma: Vec<_> = a.iter().map(|(m, _)| m.clone()).collect();
        let mb: Vec<_> = b.iter().map(|(m, _)| m.clone()).collect();
        assert_eq!(manifest_to_jsonl(&ma), manifest_to_jsonl(&mb));
        assert_eq!(manifest_from_jsonl(&manifest_to_jsonl(&ma)).unwrap(), ma);
        assert_eq!(ma[2].id, "pair-00002");
        for (m, p) in &a {
            assert_eq!(m.seed, p.seed);
            assert_eq!(m.kept, m.reject_reason.is_none());
        }
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let line = r#"{"id":"x","seed":1,"duration_s":1.0,"kept":true,"extra":1}"#;
        assert!(manifest_from_jsonl(line).is_err());
        let line = r#"{"id":"x","seed":1,"duration_s":1.0,"kept":false,"reject_reason":"silent_instrumental"}"#;
        let m = manifest_from_jsonl(line).unwrap();
        assert_eq!(m[0].reject_reason, Some(RejectReason::SilentInstrumental));
    }

    #[test]
    fn tokenized_geometry() {
        let corpus = synth_corpus(&small()).unwrap();
        let pairs: Vec<_> = corpus.into_iter().map(|(_, p)| p).collect();
        let tok = fit_tokenizers(&pairs, &tok_cfg()).unwrap();
        assert!(tok.instrumental_semantic.is_none());
        let t = tokenize_pair("p", &pairs[0], &tok, &tok_cfg()).unwrap();
        assert_eq!(t.vocal_semantic.len(), 50);
        assert_eq!(t.instrumental_semantic.len(), 50);
        assert_eq!((t.coarse.num_codebooks(), t.coarse.num_frames()), (4, 75));
        assert_eq!((t.fine.num_codebooks(), t.fine.num_frames()), (4, 75));
        assert_eq!(t.coarse.frame_rate, 75);
        assert_eq!(t.vocal_semantic, tokenize_vocal(&pairs[0], &tok, &tok_cfg()).unwrap());
        assert_eq!(t, tokenize_pair("p", &pairs[0], &tok, &tok_cfg()).unwrap());
    }

    #[test]
    fn noise_reaches_the_vocal_tokens_only() {
        let corpus = synth_corpus(&small()).unwrap();
        let pairs: Vec<_> = corpus.into_iter().map(|(_, p)| p).collect();
        let cfg = TokenizerConfig {
            kmeans_iters: 10,
            ..TokenizerConfig::default()
        };
        let tok = fit_tokenizers(&pairs, &cfg).unwrap();
        let quiet = TokenizerConfig {
            noise_sigma: 0.0,
            ..cfg.clone()
        };
        let changed = pairs.iter().any(|p| {
            let a = tokenize_pair("p", p, &tok, &cfg).unwrap();
            let b = tokenize_pair("p", p, &tok, &quiet).unwrap();
            assert_eq!(a.instrumental_semantic, b.instrumental_semantic);
            assert_eq!(a.coarse, b.coarse);
            a.vocal_semantic != b.vocal_semantic
        });
        assert!(changed);
    }

    #[test]
    fn separate_codebooks() {
        let corpus = synth_corpus(&small()).unwrap();
        let pairs: Vec<_> = corpus.into_iter().map(|(_, p)| p).collect();
        let cfg = TokenizerConfig {
            shared_semantic_codebook: false,
            ..tok_cfg()
        };
        let tok = fit_tokenizers(&pairs, &cfg).unwrap();
        assert!(tok.instrumental_semantic.is_some());
        assert!(tokenize_pair("p", &pairs[1], &tok, &cfg).is_ok());
        assert!(fit_tokenizers(&pairs, &TokenizerConfig { rvq_stages: 4, ..tok_cfg() }).is_err());
    }
}

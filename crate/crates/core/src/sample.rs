//! Guided autoregressive sampling and the three-stage inference chain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{render_features, rvq_decode, CodeGrid, FeatureStream, RvqCodec, TokenStream, Waveform};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{IncrementalDecoder, Model};
use crate::rng;
use crate::stages::{check_conditioning, deinterleave, grid_from_tokens, StageInput, StageKind};
use crate::train::model_stage_spec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.9,
            top_k: 250,
            cfg_scale: 3.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::invalid(format!("cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        Ok(())
    }
}

/// `uncond + λ (cond − uncond)`, written as `(1 − λ) uncond + λ cond` so that
/// λ = 1 and λ = 0 return the respective inputs exactly.
pub fn cfg_logits(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::shape("cfg_logits", &[cond.len()], &[uncond.len()]));
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| (1.0 - scale) * u + scale * c)
        .collect())
}

/// Keep the `k` largest entries (lower index wins ties) and set the rest to −∞.
pub fn top_k_filter(logits: &[f64], k: usize) -> Vec<f64> {
    if k >= logits.len() {
        return logits.to_vec();
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    for &i in &order[..k] {
        out[i] = logits[i];
    }
    out
}

/// Temperature, top-k, softmax, one uniform draw. Guidance is applied by the
/// caller beforehand.
pub fn sample_step<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_k: usize, rng: &mut R) -> Result<u32> {
    if logits.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("sampling logits".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
    let kept = top_k_filter(&scaled, top_k.max(1));
    let max = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateMask { row: 0 });
    }
    let weights: Vec<f64> = kept.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return Ok(i as u32);
        }
    }
    // Rounding left `u` at the top of the range.
    Ok(last as u32)
}

/// Decode `target_frames · Q` tokens with two cached passes per step, one
/// conditional and one with conditioning masked, mixed by `cfg_logits`.
pub fn generate_stage<R: Rng + ?Sized>(
    model: &Model,
    kind: StageKind,
    cond: &[CodeGrid],
    target_frames: usize,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<CodeGrid> {
    sampler.validate()?;
    let spec = model_stage_spec(model, kind);
    check_conditioning(&spec, cond)?;
    if target_frames == 0 {
        return Err(Error::invalid("target length must be at least one frame"));
    }
    let mut c = IncrementalDecoder::new(model);
    let mut u = IncrementalDecoder::new(model);
    c.condition(cond, false)?;
    u.condition(cond, true)?;
    let n = target_frames * spec.q_pred;
    let mut out = Vec::with_capacity(n);
    let mut prev = None;
    for _ in 0..n {
        let lc = c.step(prev)?;
        let lu = u.step(prev)?;
        let mixed = cfg_logits(&lc, &lu, sampler.cfg_scale)?;
        let tok = sample_step(&mixed, sampler.temperature, sampler.top_k, rng)?;
        out.push(tok);
        prev = Some(tok);
    }
    deinterleave(&out, spec.q_pred, spec.target_rate_hz, spec.pred_vocab)
}

/// Decoding from a single pass, either conditional or fully masked.
pub fn generate_unguided<R: Rng + ?Sized>(
    model: &Model,
    kind: StageKind,
    cond: &[CodeGrid],
    cfg_masked: bool,
    target_frames: usize,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<CodeGrid> {
    let spec = model_stage_spec(model, kind);
    check_conditioning(&spec, cond)?;
    let mut d = IncrementalDecoder::new(model);
    d.condition(cond, cfg_masked)?;
    let n = target_frames * spec.q_pred;
    let mut out = Vec::with_capacity(n);
    let mut prev = None;
    for _ in 0..n {
        let tok = sample_step(&d.step(prev)?, sampler.temperature, sampler.top_k, rng)?;
        out.push(tok);
        prev = Some(tok);
    }
    deinterleave(&out, spec.q_pred, spec.target_rate_hz, spec.pred_vocab)
}

/// Same as `generate_stage`, but recomputes the whole prefix with the graph
/// forward at every step. Quadratic; used to cross-check the cached decoder.
pub fn generate_stage_recompute<R: Rng + ?Sized>(
    model: &Model,
    kind: StageKind,
    cond: &[CodeGrid],
    target_frames: usize,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<CodeGrid> {
    sampler.validate()?;
    let spec = model_stage_spec(model, kind);
    check_conditioning(&spec, cond)?;
    let n = target_frames * spec.q_pred;
    let mut input = StageInput {
        cond: cond.to_vec(),
        pred_inputs: vec![None],
        cfg_masked: false,
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let last = |masked: bool| -> Result<Vec<f64>> {
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &input.with_cfg_masked(masked))?;
            let v = g.value(logits);
            Ok(v.row(v.dims2()?.0 - 1).to_vec())
        };
        let mixed = cfg_logits(&last(false)?, &last(true)?, sampler.cfg_scale)?;
        let tok = sample_step(&mixed, sampler.temperature, sampler.top_k, rng)?;
        out.push(tok);
        input.pred_inputs.push(Some(tok));
    }
    deinterleave(&out, spec.q_pred, spec.target_rate_hz, spec.pred_vocab)
}

pub struct StageModels<'a> {
    pub semantic: &'a Model,
    pub coarse: &'a Model,
    pub fine: &'a Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub instrumental_semantic: TokenStream,
    pub coarse: CodeGrid,
    pub fine: CodeGrid,
    /// All eight codebooks, coarse then fine.
    pub acoustic: CodeGrid,
    pub frames: FeatureStream,
}

fn junction(ok: bool, stage: StageKind, what: String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(what).in_stage(stage.name()))
    }
}

/// Check that the three models and the codec agree on vocabularies.
pub fn check_chain(models: &StageModels<'_>, codec: &RvqCodec, semantic_vocab: usize) -> Result<()> {
    let s = models.semantic.config();
    let c = models.coarse.config();
    let f = models.fine.config();
    let (sk, ck, fk) = (StageKind::Semantic, StageKind::Coarse, StageKind::Fine);
    junction(
        s.cond.len() == 1 && s.q_pred == 1 && semantic_vocab <= s.cond[0].vocab,
        sk,
        format!("vocal tokens with vocabulary {semantic_vocab} do not fit the model"),
    )?;
    junction(
        c.cond.len() == 2 && c.cond.iter().all(|x| x.vocab == s.pred_vocab) && c.q_pred == 4,
        ck,
        format!("model expects semantic vocabulary {}, semantic stage emits {}", c.cond[0].vocab, s.pred_vocab),
    )?;
    junction(
        f.cond.len() == 1 && f.cond[0].q == c.q_pred && f.cond[0].vocab == c.pred_vocab && f.q_pred == 4,
        fk,
        format!("model expects coarse vocabulary {}, coarse stage emits {}", f.cond[0].vocab, c.pred_vocab),
    )?;
    junction(
        codec.num_stages() == c.q_pred + f.q_pred && codec.vocab() <= c.pred_vocab.min(f.pred_vocab),
        fk,
        format!(
            "codec has {} stages of {} entries; models emit 8 codebooks below {}",
            codec.num_stages(),
            codec.vocab(),
            c.pred_vocab.min(f.pred_vocab)
        ),
    )
}

/// Vocal semantic tokens → instrumental semantic → coarse → fine → frames.
/// Each stage samples from its own stream derived from `sampler.seed`.
pub fn run_pipeline(vocal: &TokenStream, models: &StageModels<'_>, codec: &RvqCodec, sampler: &SamplerConfig) -> Result<PipelineOutput> {
    check_chain(models, codec, vocal.vocab)?;
    let sv = grid_from_tokens(vocal);
    let stream = |k: StageKind| rng::stream(sampler.seed, &format!("sample/{}", k.name()));

    let run = |k: StageKind, model: &Model, cond: &[CodeGrid]| -> Result<CodeGrid> {
        let spec = model_stage_spec(model, k);
        let frames = spec.target_frames(cond[0].num_frames());
        generate_stage(model, k, cond, frames, sampler, &mut stream(k)).map_err(|e| e.in_stage(k.name()))
    };
    let si = run(StageKind::Semantic, models.semantic, std::slice::from_ref(&sv))?;
    let coarse = run(StageKind::Coarse, models.coarse, &[sv, si.clone()])?;
    let fine = run(StageKind::Fine, models.fine, std::slice::from_ref(&coarse))?;
    let acoustic = coarse.concat(&fine)?;
    let frames = rvq_decode(&acoustic, codec).map_err(|e| e.in_stage("decode"))?;
    let instrumental_semantic = TokenStream::new(si.frame_rate, si.vocab, si.row(0).to_vec())?;
    Ok(PipelineOutput {
        instrumental_semantic,
        coarse,
        fine,
        frames: FeatureStream {
            frame_rate: acoustic.frame_rate,
            frames,
        },
        acoustic,
    })
}

/// Render decoded frames and add them to the vocal, trimming to the shorter
/// of the two. The sum is scaled to a 0.9 peak only if it would clip.
pub fn mix_with_vocal(frames: &FeatureStream, vocal: &Waveform) -> Result<Waveform> {
    let instr = render_features(frames, vocal.sample_rate)?;
    let n = instr.samples.len().min(vocal.samples.len());
    let mut mix: Vec<f64> = (0..n).map(|i| instr.samples[i] + vocal.samples[i]).collect();
    let peak = mix.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 1.0 {
        let g = 0.9 / peak;
        mix.iter_mut().for_each(|x| *x *= g);
    }
    Waveform::new(vocal.sample_rate, mix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cfg_examples() {
        let c = [0.3, -1.7, 2.25];
        let u = [1.1, 0.4, -0.6];
        assert_eq!(cfg_logits(&c, &u, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_logits(&c, &u, 0.0).unwrap(), u.to_vec());
        assert_eq!(cfg_logits(&[1.0, 0.0], &[0.0, 0.0], 3.0).unwrap(), vec![3.0, 0.0]);
        assert!(cfg_logits(&[1.0], &[0.0, 0.0], 3.0).is_err());
    }

    #[test]
    fn top_k_examples() {
        let x = [5.0, 4.0, 4.0, 1.0];
        assert_eq!(top_k_filter(&x, 4), x.to_vec());
        assert_eq!(top_k_filter(&x, 9), x.to_vec());
        let ninf = f64::NEG_INFINITY;
        assert_eq!(top_k_filter(&x, 2), vec![5.0, 4.0, ninf, ninf]);
        assert_eq!(top_k_filter(&x, 1), vec![5.0, ninf, ninf, ninf]);
        assert_eq!(top_k_filter(&[1.0, 3.0, 3.0], 1), vec![ninf, 3.0, ninf]);
    }

    #[test]
    fn sample_step_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let ninf = f64::NEG_INFINITY;
        for _ in 0..50 {
            assert_eq!(sample_step(&[ninf, 0.0, ninf], 1.0, 3, &mut r).unwrap(), 1);
            assert_eq!(sample_step(&[0.2, 1.5, 1.49], 1.0, 1, &mut r).unwrap(), 1);
            assert_eq!(sample_step(&[0.2, 1.5, 1.49], 1e-6, 3, &mut r).unwrap(), 1);
        }
        assert!(sample_step(&[ninf, ninf], 1.0, 2, &mut r).is_err());
        assert!(sample_step(&[f64::NAN, 0.0], 1.0, 2, &mut r).is_err());
    }

    #[test]
    fn sampler_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        for bad in [
            SamplerConfig { temperature: 0.0, ..Default::default() },
            SamplerConfig { top_k: 0, ..Default::default() },
            SamplerConfig { cfg_scale: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn mixing_normalizes_only_when_clipping() {
        let frames = FeatureStream {
            frame_rate: 75,
            frames: crate::tensor::Tensor::full(&[3, 2], -30.0),
        };
        let quiet = Waveform::new(24_000, vec![0.25; 960]).unwrap();
        let m = mix_with_vocal(&frames, &quiet).unwrap();
        assert_eq!(m.samples.len(), 960);
        assert!(m.samples.iter().all(|&x| (x - 0.25).abs() < 1e-6));
        let loud = Waveform::new(24_000, vec![1.5; 960]).unwrap();
        let m = mix_with_vocal(&frames, &loud).unwrap();
        let peak = m.samples.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!((peak - 0.9).abs() < 1e-12);
    }
}

//! Stage contracts and sequence assembly.
//!
//! Every stage sees the same sequence shape: conditioning segments first, in
//! source order, then the prediction span. The span input is BOS followed by
//! the interleaved target shifted right by one, so a span of `N` inputs is
//! supervised by all `N` target tokens.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{CodeGrid, CropWindow, TokenStream, ACOUSTIC_RATE_HZ, HALF_CODEBOOKS, SEMANTIC_RATE_HZ};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Semantic,
    Coarse,
    Fine,
}

impl StageKind {
    pub const ALL: [StageKind; 3] = [StageKind::Semantic, StageKind::Coarse, StageKind::Fine];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Semantic => "semantic",
            StageKind::Coarse => "coarse",
            StageKind::Fine => "fine",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(StageKind::Semantic),
            "coarse" => Ok(StageKind::Coarse),
            "fine" => Ok(StageKind::Fine),
            other => Err(Error::invalid(format!(
                "unknown stage {other:?} (expected semantic, coarse or fine)"
            ))),
        }
    }
}

/// One conditioning input of a stage. A source with `q > 1` is embedded as
/// the sum of its `q` codebook embeddings at each frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondSource {
    pub name: String,
    pub vocab: usize,
    pub rate_hz: u32,
    pub q: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageIOSpec {
    pub kind: StageKind,
    pub cond: Vec<CondSource>,
    pub pred_vocab: usize,
    pub q_pred: usize,
    pub target_rate_hz: u32,
}

impl StageIOSpec {
    /// Segment count: one per conditioning source plus the prediction span.
    pub fn n_seg(&self) -> usize {
        self.cond.len() + 1
    }

    pub fn prediction_segment(&self) -> usize {
        self.cond.len()
    }

    /// Target frames for `cond_frames` conditioning frames.
    pub fn target_frames(&self, cond_frames: usize) -> usize {
        let rate = self.cond[0].rate_hz;
        if rate == self.target_rate_hz {
            cond_frames
        } else if rate == SEMANTIC_RATE_HZ && self.target_rate_hz == ACOUSTIC_RATE_HZ {
            acoustic_len(cond_frames)
        } else {
            round_half_even_ratio(cond_frames as u64 * self.target_rate_hz as u64, rate as u64) as usize
        }
    }
}

/// Stage contracts at the given vocabularies (500 / 1024 at full scale).
pub fn stage_spec_with(kind: StageKind, semantic_vocab: usize, acoustic_vocab: usize) -> StageIOSpec {
    let sem = |name: &str| CondSource {
        name: name.into(),
        vocab: semantic_vocab,
        rate_hz: SEMANTIC_RATE_HZ,
        q: 1,
    };
    match kind {
        StageKind::Semantic => StageIOSpec {
            kind,
            cond: vec![sem("vocal_semantic")],
            pred_vocab: semantic_vocab,
            q_pred: 1,
            target_rate_hz: SEMANTIC_RATE_HZ,
        },
        StageKind::Coarse => StageIOSpec {
            kind,
            cond: vec![sem("vocal_semantic"), sem("instrumental_semantic")],
            pred_vocab: acoustic_vocab,
            q_pred: HALF_CODEBOOKS,
            target_rate_hz: ACOUSTIC_RATE_HZ,
        },
        StageKind::Fine => StageIOSpec {
            kind,
            cond: vec![CondSource {
                name: "coarse_acoustic".into(),
                vocab: acoustic_vocab,
                rate_hz: ACOUSTIC_RATE_HZ,
                q: HALF_CODEBOOKS,
            }],
            pred_vocab: acoustic_vocab,
            q_pred: HALF_CODEBOOKS,
            target_rate_hz: ACOUSTIC_RATE_HZ,
        },
    }
}

/// Assembled training sequence length for a `clip_s` crop, BOS included.
/// This is the relative-bias `max_distance` a stage is built with.
pub fn train_sequence_len(spec: &StageIOSpec, clip_s: f64) -> usize {
    let sem = (clip_s * SEMANTIC_RATE_HZ as f64).round() as usize;
    let frames_at = |rate: u32| if rate == SEMANTIC_RATE_HZ { sem } else { acoustic_len(sem) };
    let cond: Vec<usize> = spec.cond.iter().map(|c| frames_at(c.rate_hz)).collect();
    let pred = spec.target_frames(cond[0]) * spec.q_pred;
    SequenceLayout::new(&cond, pred).total()
}

pub fn stage_spec(kind: StageKind) -> StageIOSpec {
    stage_spec_with(kind, 500, 1024)
}

/// Time-major, codebook-minor flattening: `[a¹₁, a²₁, …, a^Q₁, a¹₂, …]`.
pub fn interleave(grid: &CodeGrid) -> Vec<u32> {
    let q = grid.num_codebooks();
    let t = grid.num_frames();
    let flat = grid.as_flat();
    let mut out = Vec::with_capacity(q * t);
    for f in 0..t {
        for c in 0..q {
            out.push(flat[c * t + f]);
        }
    }
    out
}

pub fn deinterleave(flat: &[u32], q: usize, frame_rate: u32, vocab: usize) -> Result<CodeGrid> {
    if q == 0 || flat.len() % q != 0 {
        return Err(Error::invalid(format!("{} ids do not split into {q} codebooks", flat.len())));
    }
    let t = flat.len() / q;
    let mut ids = vec![0; flat.len()];
    for (i, &id) in flat.iter().enumerate() {
        ids[(i % q) * t + i / q] = id;
    }
    CodeGrid::from_flat(frame_rate, vocab, q, ids)
}

fn round_half_even_ratio(num: u64, den: u64) -> u64 {
    let (q, r) = (num / den, num % den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

/// 75 Hz frames spanning `semantic_frames` 50 Hz frames. Odd inputs round
/// half to even.
pub fn acoustic_len(semantic_frames: usize) -> usize {
    round_half_even_ratio(semantic_frames as u64 * 3, 2) as usize
}

pub fn grid_from_tokens(s: &TokenStream) -> CodeGrid {
    CodeGrid::from_flat(s.frame_rate, s.vocab, 1, s.ids.clone()).expect("token stream ids are in range")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub segment: usize,
}

/// Positions of every segment in an assembled sequence. The last span is the
/// prediction span; its first position holds BOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub spans: Vec<Span>,
}

impl SequenceLayout {
    pub fn new(cond_lens: &[usize], pred_len: usize) -> Self {
        let mut spans = Vec::with_capacity(cond_lens.len() + 1);
        let mut start = 0;
        for (segment, &len) in cond_lens.iter().chain(std::iter::once(&pred_len)).enumerate() {
            spans.push(Span { start, len, segment });
            start += len;
        }
        Self { spans }
    }

    pub fn prediction(&self) -> Span {
        *self.spans.last().expect("layout always has a prediction span")
    }

    pub fn bos(&self) -> usize {
        self.prediction().start
    }

    pub fn total(&self) -> usize {
        let p = self.prediction();
        p.start + p.len
    }

    pub fn segment_of(&self, pos: usize) -> Option<usize> {
        self.spans
            .iter()
            .find(|s| pos >= s.start && pos < s.start + s.len)
            .map(|s| s.segment)
    }
}

/// Model input for one sequence. `pred_inputs[0]` is `None` (BOS); the rest
/// are interleaved target ids.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInput {
    pub cond: Vec<CodeGrid>,
    pub pred_inputs: Vec<Option<u32>>,
    pub cfg_masked: bool,
}

impl StageInput {
    pub fn layout(&self) -> SequenceLayout {
        let lens: Vec<usize> = self.cond.iter().map(CodeGrid::num_frames).collect();
        SequenceLayout::new(&lens, self.pred_inputs.len())
    }

    pub fn with_cfg_masked(&self, masked: bool) -> Self {
        Self {
            cfg_masked: masked,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub input: StageInput,
    pub layout: SequenceLayout,
    /// Interleaved target ids, one per prediction position.
    pub targets: Vec<u32>,
    /// Over the whole sequence: set exactly on prediction positions.
    pub loss_mask: Vec<bool>,
}

/// Check conditioning streams against a stage contract and return the common
/// conditioning length.
pub fn check_conditioning(spec: &StageIOSpec, cond: &[CodeGrid]) -> Result<usize> {
    if cond.len() != spec.cond.len() {
        return Err(Error::invalid(format!(
            "{} stage takes {} conditioning streams, got {}",
            spec.kind,
            spec.cond.len(),
            cond.len()
        )));
    }
    let len = cond[0].num_frames();
    for (src, g) in spec.cond.iter().zip(cond) {
        if g.frame_rate != src.rate_hz || g.num_codebooks() != src.q || g.vocab > src.vocab {
            return Err(Error::invalid(format!(
                "{} expects {}×{} Hz ids below {}, got {}×{} Hz below {}",
                src.name,
                src.q,
                src.rate_hz,
                src.vocab,
                g.num_codebooks(),
                g.frame_rate,
                g.vocab
            )));
        }
        if g.num_frames() != len {
            return Err(Error::invalid(format!(
                "{} has {} frames but the first source has {len}",
                src.name,
                g.num_frames()
            )));
        }
    }
    Ok(len)
}

/// Teacher-forced training sequence for one example.
pub fn build_train_sequence(
    spec: &StageIOSpec,
    cond: &[CodeGrid],
    target: &CodeGrid,
    cfg_masked: bool,
) -> Result<TrainSequence> {
    let cond_len = check_conditioning(spec, cond)?;
    if target.frame_rate != spec.target_rate_hz || target.num_codebooks() != spec.q_pred || target.vocab > spec.pred_vocab {
        return Err(Error::invalid(format!(
            "{} target must be {}×{} Hz ids below {}",
            spec.kind, spec.q_pred, spec.target_rate_hz, spec.pred_vocab
        )));
    }
    let want = spec.target_frames(cond_len);
    if target.num_frames() != want {
        return Err(Error::invalid(format!(
            "{} target has {} frames; {cond_len} conditioning frames need {want}",
            spec.kind,
            target.num_frames()
        )));
    }
    let targets = interleave(target);
    if targets.is_empty() {
        return Err(Error::invalid("empty target sequence"));
    }
    let pred_inputs: Vec<Option<u32>> = std::iter::once(None)
        .chain(targets[..targets.len() - 1].iter().map(|&t| Some(t)))
        .collect();
    let input = StageInput {
        cond: cond.to_vec(),
        pred_inputs,
        cfg_masked,
    };
    let layout = input.layout();
    let p = layout.prediction();
    let loss_mask = (0..layout.total()).map(|i| i >= p.start).collect();
    Ok(TrainSequence {
        input,
        layout,
        targets,
        loss_mask,
    })
}

/// All token streams derived from one kept pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTokens {
    pub id: String,
    pub vocal_semantic: TokenStream,
    pub instrumental_semantic: TokenStream,
    pub coarse: CodeGrid,
    pub fine: CodeGrid,
}

impl PairTokens {
    pub fn crop(&self, w: &CropWindow) -> Result<PairTokens> {
        Ok(PairTokens {
            id: self.id.clone(),
            vocal_semantic: w.apply_tokens(&self.vocal_semantic)?,
            instrumental_semantic: w.apply_tokens(&self.instrumental_semantic)?,
            coarse: w.apply_grid(&self.coarse)?,
            fine: w.apply_grid(&self.fine)?,
        })
    }

    /// Conditioning streams and target grid of `kind`.
    pub fn stage_io(&self, kind: StageKind) -> (Vec<CodeGrid>, CodeGrid) {
        match kind {
            StageKind::Semantic => (
                vec![grid_from_tokens(&self.vocal_semantic)],
                grid_from_tokens(&self.instrumental_semantic),
            ),
            StageKind::Coarse => (
                vec![
                    grid_from_tokens(&self.vocal_semantic),
                    grid_from_tokens(&self.instrumental_semantic),
                ],
                self.coarse.clone(),
            ),
            StageKind::Fine => (vec![self.coarse.clone()], self.fine.clone()),
        }
    }
}

//! Discrete token containers and time-aligned cropping across frame rates.

use rand::Rng;

use crate::error::{Error, Result};

/// Single-codebook token ids at a fixed frame rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub frame_rate: u32,
    pub vocab: usize,
    pub ids: Vec<u32>,
}

impl TokenStream {
    pub fn new(frame_rate: u32, vocab: usize, ids: Vec<u32>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::IdOutOfRange {
                id: bad as usize,
                vocab,
            });
        }
        Ok(Self {
            frame_rate,
            vocab,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `Q × T` multi-codebook ids, stored codebook-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    pub frame_rate: u32,
    pub vocab: usize,
    num_codebooks: usize,
    ids: Vec<u32>,
}

impl CodeGrid {
    pub fn from_rows(frame_rate: u32, vocab: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        let t = rows.first().map_or(0, Vec::len);
        if rows.is_empty() {
            return Err(Error::invalid("code grid needs at least one codebook"));
        }
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::invalid("ragged code grid: codebook rows differ in length"));
        }
        let q = rows.len();
        Self::from_flat(frame_rate, vocab, q, rows.into_iter().flatten().collect())
    }

    /// Codebook-major flat ids (`ids[q * T + t]`).
    pub fn from_flat(frame_rate: u32, vocab: usize, num_codebooks: usize, ids: Vec<u32>) -> Result<Self> {
        if num_codebooks == 0 || ids.len() % num_codebooks != 0 {
            return Err(Error::invalid(format!(
                "{} ids do not form {num_codebooks} equal codebook rows",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::IdOutOfRange {
                id: bad as usize,
                vocab,
            });
        }
        Ok(Self {
            frame_rate,
            vocab,
            num_codebooks,
            ids,
        })
    }

    pub fn num_codebooks(&self) -> usize {
        self.num_codebooks
    }

    pub fn num_frames(&self) -> usize {
        self.ids.len() / self.num_codebooks
    }

    pub fn row(&self, q: usize) -> &[u32] {
        let t = self.num_frames();
        &self.ids[q * t..(q + 1) * t]
    }

    pub fn get(&self, q: usize, t: usize) -> u32 {
        self.ids[q * self.num_frames() + t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        (0..self.num_codebooks).map(move |q| self.row(q))
    }

    pub fn as_flat(&self) -> &[u32] {
        &self.ids
    }

    /// Frames `start..start + len` of every codebook.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<CodeGrid> {
        if start + len > self.num_frames() {
            return Err(Error::invalid(format!(
                "frames {start}..{} out of {}",
                start + len,
                self.num_frames()
            )));
        }
        let ids = self.rows().flat_map(|r| r[start..start + len].iter().copied()).collect();
        CodeGrid::from_flat(self.frame_rate, self.vocab, self.num_codebooks, ids)
    }

    /// Stack the codebooks of `self` above those of `other`.
    pub fn concat(&self, other: &CodeGrid) -> Result<CodeGrid> {
        if self.num_frames() != other.num_frames() || self.frame_rate != other.frame_rate || self.vocab != other.vocab {
            return Err(Error::invalid("cannot stack code grids with different geometry"));
        }
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        CodeGrid::from_flat(self.frame_rate, self.vocab, self.num_codebooks + other.num_codebooks, ids)
    }

    /// Codebooks `from..to`.
    pub fn codebooks(&self, from: usize, to: usize) -> Result<CodeGrid> {
        if from >= to || to > self.num_codebooks {
            return Err(Error::invalid(format!("codebooks {from}..{to} of {}", self.num_codebooks)));
        }
        let t = self.num_frames();
        CodeGrid::from_flat(self.frame_rate, self.vocab, to - from, self.ids[from * t..to * t].to_vec())
    }
}

/// Number of codebooks in a full acoustic grid and in each half.
pub const ACOUSTIC_CODEBOOKS: usize = 8;
pub const HALF_CODEBOOKS: usize = 4;

/// Split an 8-codebook grid into coarse (codebooks 1–4) and fine (5–8).
pub fn split_coarse_fine(grid: &CodeGrid) -> Result<(CodeGrid, CodeGrid)> {
    if grid.num_codebooks() != ACOUSTIC_CODEBOOKS {
        return Err(Error::invalid(format!(
            "coarse/fine split needs {ACOUSTIC_CODEBOOKS} codebooks, got {}",
            grid.num_codebooks()
        )));
    }
    Ok((
        grid.codebooks(0, HALF_CODEBOOKS)?,
        grid.codebooks(HALF_CODEBOOKS, ACOUSTIC_CODEBOOKS)?,
    ))
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A crop expressed on the common frame-boundary grid of two rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    /// Ticks per second; the gcd of the two frame rates (25 for 50/75 Hz).
    pub tick_rate: u32,
    pub offset_ticks: usize,
    pub len_ticks: usize,
}

impl CropWindow {
    pub fn offset_s(&self) -> f64 {
        self.offset_ticks as f64 / self.tick_rate as f64
    }

    /// Frame range `(start, len)` of this window at `rate`.
    pub fn frames_at(&self, rate: u32) -> Result<(usize, usize)> {
        if rate % self.tick_rate != 0 {
            return Err(Error::invalid(format!("rate {rate} is not a multiple of {}", self.tick_rate)));
        }
        let per = (rate / self.tick_rate) as usize;
        Ok((self.offset_ticks * per, self.len_ticks * per))
    }

    pub fn apply_tokens(&self, s: &TokenStream) -> Result<TokenStream> {
        let (start, len) = self.frames_at(s.frame_rate)?;
        if start + len > s.len() {
            return Err(Error::invalid("crop window exceeds token stream"));
        }
        TokenStream::new(s.frame_rate, s.vocab, s.ids[start..start + len].to_vec())
    }

    pub fn apply_grid(&self, g: &CodeGrid) -> Result<CodeGrid> {
        let (start, len) = self.frames_at(g.frame_rate)?;
        g.slice_frames(start, len)
    }
}

/// Draw a crop of `clip_s` seconds that starts on a frame boundary of both
/// `rate_a` and `rate_b`, uniformly among offsets that fit in both streams.
pub fn draw_crop_window<R: Rng + ?Sized>(
    rate_a: u32,
    frames_a: usize,
    rate_b: u32,
    frames_b: usize,
    clip_s: f64,
    rng: &mut R,
) -> Result<CropWindow> {
    if rate_a == 0 || rate_b == 0 {
        return Err(Error::invalid("frame rates must be positive"));
    }
    let tick_rate = gcd(rate_a, rate_b);
    let ticks_f = clip_s * tick_rate as f64;
    let len_ticks = ticks_f.round() as usize;
    if clip_s <= 0.0 || (ticks_f - len_ticks as f64).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "clip of {clip_s} s is not a positive multiple of 1/{tick_rate} s"
        )));
    }
    let avail = (frames_a / (rate_a / tick_rate) as usize).min(frames_b / (rate_b / tick_rate) as usize);
    if len_ticks > avail {
        return Err(Error::invalid(format!(
            "clip of {clip_s} s is longer than the source ({} s)",
            avail as f64 / tick_rate as f64
        )));
    }
    let offset_ticks = rng.gen_range(0..=avail - len_ticks);
    Ok(CropWindow {
        tick_rate,
        offset_ticks,
        len_ticks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCrop {
    pub window: CropWindow,
    pub semantic: TokenStream,
    pub acoustic: CodeGrid,
}

/// Crop a semantic stream and an acoustic grid at the same wall-clock offset.
pub fn aligned_crop<R: Rng + ?Sized>(
    semantic: &TokenStream,
    acoustic: &CodeGrid,
    clip_s: f64,
    rng: &mut R,
) -> Result<AlignedCrop> {
    let window = draw_crop_window(
        semantic.frame_rate,
        semantic.len(),
        acoustic.frame_rate,
        acoustic.num_frames(),
        clip_s,
        rng,
    )?;
    Ok(AlignedCrop {
        window,
        semantic: window.apply_tokens(semantic)?,
        acoustic: window.apply_grid(acoustic)?,
    })
}

//! On-disk formats: token files, raw-float frame files and checkpoints.
//!
//! Token file (`HAFM`), little-endian:
//!
//! ```text
//! magic "HAFM" | version u16 | kind u8 | frame_rate_hz u16 | Q u8 | vocab u32 | T u64
//! Q·T u16 ids, interleaved (frame-major, codebook-minor)
//! ```
//!
//! Frame file (`HAFF`): `magic | dim u32 | rate u16 | T u64 | T·dim f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{CodeGrid, FeatureStream, TokenStream, Waveform};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::stages::{deinterleave, interleave, StageKind};
use crate::tensor::Tensor;
use crate::train::OptimizerState;

pub const TOKEN_MAGIC: &[u8; 4] = b"HAFM";
pub const TOKEN_VERSION: u16 = 1;
pub const FRAME_MAGIC: &[u8; 4] = b"HAFF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HAFC";
pub const CHECKPOINT_VERSION: u16 = 1;
const TOKEN_HEADER_LEN: usize = 4 + 2 + 1 + 2 + 1 + 4 + 8;
const FRAME_HEADER_LEN: usize = 4 + 4 + 2 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Semantic = 0,
    Coarse = 1,
    Fine = 2,
    FullAcoustic = 3,
}

impl TokenKind {
    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            0 => TokenKind::Semantic,
            1 => TokenKind::Coarse,
            2 => TokenKind::Fine,
            3 => TokenKind::FullAcoustic,
            _ => return Err(Error::format("token file", format!("unknown kind {b}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFile {
    pub kind: TokenKind,
    pub grid: CodeGrid,
}

impl TokenFile {
    pub fn semantic(s: &TokenStream) -> Self {
        Self {
            kind: TokenKind::Semantic,
            grid: crate::stages::grid_from_tokens(s),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let g = &self.grid;
        let q = u8::try_from(g.num_codebooks()).map_err(|_| Error::format("token file", "more than 255 codebooks"))?;
        let rate = u16::try_from(g.frame_rate).map_err(|_| Error::format("token file", "frame rate above 65535"))?;
        if g.vocab > u16::MAX as usize + 1 {
            return Err(Error::format("token file", format!("vocabulary {} exceeds 16-bit ids", g.vocab)));
        }
        let mut out = Vec::with_capacity(TOKEN_HEADER_LEN + 2 * g.as_flat().len());
        out.extend_from_slice(TOKEN_MAGIC);
        out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&rate.to_le_bytes());
        out.push(q);
        out.extend_from_slice(&(g.vocab as u32).to_le_bytes());
        out.extend_from_slice(&(g.num_frames() as u64).to_le_bytes());
        for id in interleave(g) {
            out.extend_from_slice(&(id as u16).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |r: String| Error::format("token file", r);
        if b.len() < TOKEN_HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", b.len())));
        }
        if &b[..4] != TOKEN_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != TOKEN_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let kind = TokenKind::from_u8(b[6])?;
        let rate = u16::from_le_bytes([b[7], b[8]]) as u32;
        let q = b[9] as usize;
        let vocab = u32::from_le_bytes(b[10..14].try_into().expect("4 bytes")) as usize;
        let t = u64::from_le_bytes(b[14..22].try_into().expect("8 bytes"));
        let n = (q as u64)
            .checked_mul(t)
            .and_then(|n| n.checked_mul(2))
            .ok_or_else(|| bad("payload size overflows".into()))?;
        if (b.len() - TOKEN_HEADER_LEN) as u64 != n {
            return Err(bad(format!(
                "payload is {} bytes, header says {q}×{t} ids",
                b.len() - TOKEN_HEADER_LEN
            )));
        }
        if q == 0 || rate == 0 {
            return Err(bad("zero codebooks or frame rate".into()));
        }
        let ids: Vec<u32> = b[TOKEN_HEADER_LEN..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
            .collect();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(bad(format!("id {id} outside vocabulary {vocab}")));
        }
        Ok(Self {
            kind,
            grid: deinterleave(&ids, q, rate, vocab)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// The single codebook of a semantic file as a token stream.
    pub fn to_stream(&self) -> Result<TokenStream> {
        if self.grid.num_codebooks() != 1 {
            return Err(Error::format("token file", "expected a single-codebook stream"));
        }
        TokenStream::new(self.grid.frame_rate, self.grid.vocab, self.grid.row(0).to_vec())
    }
}

/// Frames (or a waveform, as `dim = 1` at the sample rate) in `HAFF` form.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFile {
    pub rate: u32,
    pub frames: Tensor,
}

impl FrameFile {
    pub fn from_features(f: &FeatureStream) -> Self {
        Self {
            rate: f.frame_rate,
            frames: f.frames.clone(),
        }
    }

    pub fn from_waveform(w: &Waveform) -> Result<Self> {
        Ok(Self {
            rate: w.sample_rate,
            frames: Tensor::new(vec![w.samples.len(), 1], w.samples.clone())?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (t, dim) = self.frames.dims2()?;
        let rate = u16::try_from(self.rate).map_err(|_| Error::format("frame file", "rate above 65535"))?;
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + 4 * t * dim);
        out.extend_from_slice(FRAME_MAGIC);
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(t as u64).to_le_bytes());
        for &x in self.frames.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |r: String| Error::format("frame file", r);
        if b.len() < FRAME_HEADER_LEN || &b[..4] != FRAME_MAGIC {
            return Err(bad("bad header".into()));
        }
        let dim = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes")) as usize;
        let rate = u16::from_le_bytes([b[8], b[9]]) as u32;
        let t = u64::from_le_bytes(b[10..18].try_into().expect("8 bytes")) as usize;
        let payload = &b[FRAME_HEADER_LEN..];
        if t.checked_mul(dim).and_then(|n| n.checked_mul(4)) != Some(payload.len()) {
            return Err(bad(format!("payload is {} bytes, header says {t}×{dim} floats", payload.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Self {
            rate,
            frames: Tensor::new(vec![t, dim], data)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    stage: StageKind,
    config_echo: String,
    model: ModelConfig,
    train_ids: Vec<String>,
    params: Vec<ParamEntry>,
    optimizer_step: Option<u64>,
}

/// A trained stage. Layout: `magic "HAFC" | version u16 | header_len u32 |
/// JSON header | parameter values as f64 | optional Adam moments (m then v)`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: StageKind,
    /// The run configuration text, verbatim.
    pub config_echo: String,
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    /// Manifest ids the model was trained on.
    pub train_ids: Vec<String>,
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = CheckpointHeader {
            stage: self.stage,
            config_echo: self.config_echo.clone(),
            model: self.model.config().clone(),
            train_ids: self.train_ids.clone(),
            params: params
                .iter()
                .map(|(_, n, t)| ParamEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in params.iter() {
            put_f64s(&mut out, t.data());
        }
        if let Some(o) = &self.optimizer {
            if !o.matches(params) {
                return Err(Error::invalid("optimizer state does not match the model"));
            }
            o.m.iter().for_each(|m| put_f64s(&mut out, m));
            o.v.iter().for_each(|v| put_f64s(&mut out, v));
        }
        Ok(out)
    }

    /// Parse and rebuild the model, checking every parameter shape against
    /// the stored configuration.
    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader { b, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut named = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n = p.shape.iter().product();
            named.push((p.name.clone(), Tensor::new(p.shape.clone(), r.f64s(n)?)?));
        }
        let model = Model::from_params(header.model, named)?;
        let optimizer = match header.optimizer_step {
            None => None,
            Some(step) => {
                let sizes: Vec<usize> = model.params().iter().map(|(_, _, t)| t.len()).collect();
                let m = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                Some(OptimizerState { step, m, v })
            }
        };
        if r.pos != b.len() {
            return Err(Error::format("checkpoint", format!("{} trailing bytes", b.len() - r.pos)));
        }
        Ok(Self {
            stage: header.stage,
            config_echo: header.config_echo,
            model,
            optimizer,
            train_ids: header.train_ids,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::stages::stage_spec_with;

    #[test]
    fn token_file_layout() {
        let grid = CodeGrid::from_rows(75, 1024, vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 1023]]).unwrap();
        let f = TokenFile {
            kind: TokenKind::Coarse,
            grid,
        };
        let b = f.to_bytes().unwrap();
        assert_eq!(&b[..4], b"HAFM");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 1);
        assert_eq!(&b[7..9], &75u16.to_le_bytes());
        assert_eq!(b[9], 4);
        assert_eq!(&b[10..14], &1024u32.to_le_bytes());
        assert_eq!(&b[14..22], &2u64.to_le_bytes());
        let ids: Vec<u16> = b[22..].chunks(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        assert_eq!(ids, vec![1, 3, 5, 7, 2, 4, 6, 1023]);
        assert_eq!(TokenFile::from_bytes(&b).unwrap(), f);
    }

    #[test]
    fn token_file_rejects_corruption() {
        let f = TokenFile {
            kind: TokenKind::Semantic,
            grid: CodeGrid::from_rows(50, 10, vec![vec![1, 2, 9]]).unwrap(),
        };
        let b = f.to_bytes().unwrap();
        assert!(TokenFile::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(TokenFile::from_bytes(&bad).is_err());
        let mut bad = b.clone();
        bad[22] = 10;
        assert!(TokenFile::from_bytes(&bad).is_err());
        let mut bad = b;
        bad[6] = 9;
        assert!(TokenFile::from_bytes(&bad).is_err());
    }

    #[test]
    fn frame_file_round_trip() {
        let t = Tensor::new(vec![3, 2], vec![0.5, -1.25, 2.0, 0.0, 1e-3, 7.0]).unwrap();
        let f = FrameFile { rate: 75, frames: t };
        let back = FrameFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
        assert_eq!(back.rate, 75);
        assert_eq!(back.frames.shape(), &[3, 2]);
        assert!(back.frames.max_abs_diff(&f.frames) < 1e-6);
        assert!(FrameFile::from_bytes(&f.to_bytes().unwrap()[..20]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = stage_spec_with(StageKind::Coarse, 6, 7);
        let arch = Arch {
            layers: 1,
            d_model: 8,
            heads: 2,
            ff_mult: 4.0,
            num_buckets: 8,
        };
        let model = Model::init(ModelConfig::for_stage(&spec, &arch, 16).unwrap(), 3).unwrap();
        let mut opt = OptimizerState::new(model.params());
        opt.step = 12;
        opt.m[0][0] = 0.25;
        let ck = Checkpoint {
            stage: StageKind::Coarse,
            config_echo: "[train]\n# comment kept\nseed = 1\n".into(),
            model,
            optimizer: Some(opt.clone()),
            train_ids: vec!["pair-00000".into()],
        };
        let b = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back.config_echo, ck.config_echo);
        assert_eq!(back.optimizer, Some(opt));
        assert_eq!(back.train_ids, ck.train_ids);
        for ((_, n, a), (_, m, c)) in back.model.params().iter().zip(ck.model.params().iter()) {
            assert_eq!((n, a), (m, c));
        }
        assert!(Checkpoint::from_bytes(&b[..b.len() - 8]).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}

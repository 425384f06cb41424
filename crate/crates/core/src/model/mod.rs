//! Decoder-only causal Transformer for one generation stage.

mod decoder;
mod forward;
pub mod relpos;

pub use decoder::IncrementalDecoder;
pub use relpos::{bucket_of_distance, bucket_table, relpos_bucket};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ParamId, ParamStore};
use crate::rng;
use crate::stages::StageIOSpec;
use crate::tensor::Tensor;

pub const RMS_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Size-related hyperparameters shared by all stages of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Arch {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: f64,
    pub num_buckets: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            layers: 12,
            d_model: 512,
            heads: 8,
            ff_mult: 4.0,
            num_buckets: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondSpec {
    pub vocab: usize,
    /// Codebooks summed per frame; 1 for single-stream sources.
    pub q: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: f64,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub cond: Vec<CondSpec>,
    pub pred_vocab: usize,
    pub q_pred: usize,
}

impl ModelConfig {
    pub fn for_stage(spec: &StageIOSpec, arch: &Arch, max_distance: usize) -> Result<Self> {
        let cfg = Self {
            layers: arch.layers,
            d_model: arch.d_model,
            heads: arch.heads,
            ff_mult: arch.ff_mult,
            num_buckets: arch.num_buckets,
            max_distance,
            cond: spec.cond.iter().map(|c| CondSpec { vocab: c.vocab, q: c.q }).collect(),
            pred_vocab: spec.pred_vocab,
            q_pred: spec.q_pred,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 {
            return bad("layers, d_model and heads must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if !(self.ff_mult > 0.0) || self.d_ff() == 0 {
            return bad(format!("ff_mult {} gives an empty feed-forward layer", self.ff_mult));
        }
        if self.cond.is_empty() || self.cond.iter().any(|c| c.vocab == 0 || c.q == 0) {
            return bad("every stage needs conditioning sources with non-empty vocabularies".into());
        }
        if self.pred_vocab == 0 || self.q_pred == 0 {
            return bad("prediction vocabulary and codebook count must be positive".into());
        }
        relpos::bucket_of_distance(0, self.num_buckets, self.max_distance).map(|_| ())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// `floor(2/3 · d_model · ff_mult)`.
    pub fn d_ff(&self) -> usize {
        (2.0 * self.d_model as f64 * self.ff_mult / 3.0).floor() as usize
    }

    pub fn n_seg(&self) -> usize {
        self.cond.len() + 1
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIds {
    pub attn_norm: ParamId,
    pub wqkv: ParamId,
    pub q_norm: ParamId,
    pub k_norm: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIds {
    /// `cond[source][codebook]`.
    pub cond: Vec<Vec<ParamId>>,
    pub pred: Vec<ParamId>,
    pub qoff: ParamId,
    pub seg: ParamId,
    pub rel_bias: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_norm: ParamId,
    pub heads: Vec<ParamId>,
}

/// A stage model: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    ids: ParamIds,
    /// Bucket of every distance below `max_distance`.
    buckets: Vec<usize>,
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], truncate: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if !truncate || v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl Model {
    /// Fresh model: embeddings from N(0, 0.02), matrices from the same
    /// normal truncated at two standard deviations, norm gains at 1.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "init");
        let d = cfg.d_model;
        let ff = cfg.d_ff();
        let mut p = ParamStore::new();
        let mut cond = Vec::new();
        for (s, c) in cfg.cond.iter().enumerate() {
            let mut tables = Vec::new();
            for q in 0..c.q {
                tables.push(p.insert(format!("emb.cond.{s}.{q}"), normal_tensor(&mut rng, &[c.vocab + 1, d], false))?);
            }
            cond.push(tables);
        }
        let pred = (0..cfg.q_pred)
            .map(|q| p.insert(format!("emb.pred.{q}"), normal_tensor(&mut rng, &[cfg.pred_vocab + 1, d], false)))
            .collect::<Result<Vec<_>>>()?;
        let qoff = p.insert("emb.qoff", normal_tensor(&mut rng, &[cfg.q_pred, d], false))?;
        let seg = p.insert("emb.seg", normal_tensor(&mut rng, &[cfg.n_seg(), d], false))?;
        let rel_bias = p.insert("rel_bias", normal_tensor(&mut rng, &[cfg.num_buckets, cfg.heads], true))?;
        let mut blocks = Vec::new();
        for l in 0..cfg.layers {
            let mut m = |name: &str, shape: &[usize], p: &mut ParamStore| {
                p.insert(format!("blocks.{l}.{name}"), normal_tensor(&mut rng, shape, true))
            };
            let wqkv = m("wqkv", &[d, 3 * d], &mut p)?;
            let wo = m("wo", &[d, d], &mut p)?;
            let w1 = m("w1", &[d, ff], &mut p)?;
            let w2 = m("w2", &[d, ff], &mut p)?;
            let w3 = m("w3", &[ff, d], &mut p)?;
            let ones = |name: &str, p: &mut ParamStore| p.insert(format!("blocks.{l}.{name}"), Tensor::full(&[d], 1.0));
            blocks.push(BlockIds {
                attn_norm: ones("attn_norm", &mut p)?,
                wqkv,
                q_norm: ones("q_norm", &mut p)?,
                k_norm: ones("k_norm", &mut p)?,
                wo,
                ffn_norm: ones("ffn_norm", &mut p)?,
                w1,
                w2,
                w3,
            });
        }
        let final_norm = p.insert("final_norm", Tensor::full(&[d], 1.0))?;
        let heads = (0..cfg.q_pred)
            .map(|q| p.insert(format!("head.{q}"), normal_tensor(&mut rng, &[d, cfg.pred_vocab], true)))
            .collect::<Result<Vec<_>>>()?;
        let buckets = relpos::bucket_table(cfg.max_distance, cfg.num_buckets, cfg.max_distance)?;
        Ok(Self {
            cfg,
            params: p,
            buckets,
            ids: ParamIds {
                cond,
                pred,
                qoff,
                seg,
                rel_bias,
                blocks,
                final_norm,
                heads,
            },
        })
    }

    /// Rebuild a model from a named parameter table, checking every shape
    /// against a freshly initialized model of the same configuration.
    pub fn from_params(cfg: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::init(cfg, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::format(
                "parameters",
                format!("expected {} tensors, found {}", model.params.len(), named.len()),
            ));
        }
        for (name, value) in named {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::format("parameters", format!("unexpected tensor {name}")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::format(
                    "parameters",
                    format!("{name} has shape {:?}, config needs {:?}", value.shape(), slot.shape()),
                ));
            }
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.by_name(name)
    }

    /// Overwrite one named parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        let slot = self.params.get_mut(id);
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }
}

//! Row-at-a-time decoding with cached keys and values.
//!
//! Uses the same row kernels as the graph in the same order, so each emitted
//! logit row is bitwise equal to the corresponding row of a full forward
//! pass over the same prefix.

use crate::codec::CodeGrid;
use crate::error::{Error, Result};
use crate::kernels;

use super::forward::Picks;
use super::{Model, RMS_EPS};

pub struct IncrementalDecoder<'m> {
    model: &'m Model,
    tables: Vec<&'m [f64]>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    /// Prediction positions fed so far; `None` until conditioning is done.
    pred_fed: Option<usize>,
    probs: Vec<f64>,
    bias: Vec<f64>,
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m Model) -> Self {
        let tables = model
            .table_ids()
            .into_iter()
            .map(|id| model.params.get(id).data())
            .collect();
        let layers = model.cfg.layers;
        Self {
            model,
            tables,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
            pred_fed: None,
            probs: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feed all conditioning positions. Must be called exactly once, first.
    pub fn condition(&mut self, cond: &[CodeGrid], cfg_masked: bool) -> Result<()> {
        if self.len != 0 {
            return Err(Error::invalid("conditioning must be fed before any other position"));
        }
        for picks in self.model.cond_picks(cond, cfg_masked)? {
            let x = self.embed(&picks);
            self.push_row(x);
        }
        self.pred_fed = Some(0);
        Ok(())
    }

    /// Feed the next prediction-span input (`None` for BOS) and return the
    /// logits it produces, from head `p mod Q`.
    pub fn step(&mut self, token: Option<u32>) -> Result<Vec<f64>> {
        let p = self
            .pred_fed
            .ok_or_else(|| Error::invalid("feed conditioning before prediction tokens"))?;
        let picks = self.model.pred_picks(p, token)?;
        let x = self.embed(&picks);
        let h = self.push_row(x);
        self.pred_fed = Some(p + 1);
        let cfg = &self.model.cfg;
        let head = self.model.params.get(self.model.ids.heads[p % cfg.q_pred]).data();
        Ok(kernels::vec_mat(&h, head, cfg.pred_vocab))
    }

    fn embed(&self, picks: &Picks) -> Vec<f64> {
        let d = self.model.cfg.d_model;
        let mut x = vec![0.0; d];
        for &(t, r) in picks {
            kernels::axpy(1.0, &self.tables[t][r * d..(r + 1) * d], &mut x);
        }
        x
    }

    /// Run one position through every block; returns its final-normalized
    /// hidden state.
    fn push_row(&mut self, mut x: Vec<f64>) -> Vec<f64> {
        let model = self.model;
        let cfg = &model.cfg;
        let d = cfg.d_model;
        let dk = cfg.d_k();
        let heads = cfg.heads;
        let ff = cfg.d_ff();
        let pos = self.len;
        let scale = 1.0 / (dk as f64).sqrt();
        let table = model.params.get(model.ids.rel_bias).data();
        let p = |id| model.params.get(id).data();
        let norm = |x: &[f64], gain: &[f64], group: usize| {
            let mut out = vec![0.0; x.len()];
            let mut scratch = Vec::new();
            kernels::rmsnorm_groups(x, gain, group, RMS_EPS, &mut out, &mut scratch);
            out
        };
        self.probs.resize(pos + 1, 0.0);
        self.bias.resize(pos + 1, 0.0);
        for (l, b) in model.ids.blocks.iter().enumerate() {
            let h = norm(&x, p(b.attn_norm), d);
            let qkv = kernels::vec_mat(&h, p(b.wqkv), 3 * d);
            let q = norm(&qkv[..d], p(b.q_norm), dk);
            let k = norm(&qkv[d..2 * d], p(b.k_norm), dk);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let mut att = vec![0.0; d];
            for hd in 0..heads {
                for key in 0..=pos {
                    self.bias[key] = table[model.bucket(pos - key) * heads + hd];
                }
                kernels::attend_row(
                    &q[hd * dk..(hd + 1) * dk],
                    &self.keys[l],
                    &self.values[l],
                    d,
                    hd * dk,
                    pos,
                    &self.bias,
                    scale,
                    &mut self.probs,
                    &mut att[hd * dk..(hd + 1) * dk],
                );
            }
            let o = kernels::vec_mat(&att, p(b.wo), d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let h = norm(&x, p(b.ffn_norm), d);
            let gate = kernels::vec_mat(&h, p(b.w1), ff);
            let val = kernels::vec_mat(&h, p(b.w2), ff);
            let inner: Vec<f64> = gate.iter().zip(&val).map(|(g, v)| kernels::gelu(*g) * v).collect();
            let f = kernels::vec_mat(&inner, p(b.w3), d);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        self.len += 1;
        norm(&x, p(model.ids.final_norm), d)
    }
}

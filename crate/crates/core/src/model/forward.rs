use crate::codec::CodeGrid;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, Var};
use crate::stages::{SequenceLayout, StageInput};

use super::{Model, RMS_EPS};

/// `(table, row)` pairs summed into one position's embedding.
pub(crate) type Picks = Vec<(usize, usize)>;

impl Model {
    /// Embedding tables in pick order: conditioning tables by source then
    /// codebook, prediction tables, quantizer offsets, segments.
    pub(crate) fn table_ids(&self) -> Vec<ParamId> {
        let mut t: Vec<ParamId> = self.ids.cond.iter().flatten().copied().collect();
        t.extend(&self.ids.pred);
        t.push(self.ids.qoff);
        t.push(self.ids.seg);
        t
    }

    fn n_cond_tables(&self) -> usize {
        self.ids.cond.iter().map(Vec::len).sum()
    }

    /// Picks for every conditioning position, source by source.
    pub(crate) fn cond_picks(&self, cond: &[CodeGrid], cfg_masked: bool) -> Result<Vec<Picks>> {
        if cond.len() != self.cfg.cond.len() {
            return Err(Error::invalid(format!(
                "model takes {} conditioning streams, got {}",
                self.cfg.cond.len(),
                cond.len()
            )));
        }
        let seg_table = self.n_cond_tables() + self.cfg.q_pred + 1;
        let mut out = Vec::new();
        let mut table0 = 0;
        for (s, (spec, grid)) in self.cfg.cond.iter().zip(cond).enumerate() {
            if grid.num_codebooks() != spec.q {
                return Err(Error::invalid(format!(
                    "conditioning source {s} needs {} codebooks, got {}",
                    spec.q,
                    grid.num_codebooks()
                )));
            }
            for t in 0..grid.num_frames() {
                let mut picks = Vec::with_capacity(spec.q + 1);
                if !cfg_masked {
                    for q in 0..spec.q {
                        let id = grid.get(q, t) as usize;
                        if id >= spec.vocab {
                            return Err(Error::IdOutOfRange { id, vocab: spec.vocab });
                        }
                        picks.push((table0 + q, id));
                    }
                }
                picks.push((seg_table, s));
                out.push(picks);
            }
            table0 += spec.q;
        }
        Ok(out)
    }

    /// Picks for prediction-span position `p` holding `token` (`None` = BOS,
    /// only at `p = 0`). The token comes from codebook `(p - 1) mod Q`; the
    /// offset row is `p mod Q`.
    pub(crate) fn pred_picks(&self, p: usize, token: Option<u32>) -> Result<Picks> {
        let q = self.cfg.q_pred;
        let v = self.cfg.pred_vocab;
        let row = match (p, token) {
            (0, None) => v,
            (0, Some(_)) => return Err(Error::invalid("prediction span must start with BOS")),
            (_, None) => return Err(Error::invalid(format!("BOS at prediction position {p}"))),
            (_, Some(id)) if id as usize >= v => return Err(Error::IdOutOfRange { id: id as usize, vocab: v }),
            (_, Some(id)) => id as usize,
        };
        let base = self.n_cond_tables();
        Ok(vec![
            (base + (p + q - 1) % q, row),
            (base + q, p % q),
            (base + q + 1, self.cfg.cond.len()),
        ])
    }

    pub(crate) fn embed_picks(&self, input: &StageInput) -> Result<Vec<Picks>> {
        let mut picks = self.cond_picks(&input.cond, input.cfg_masked)?;
        for (p, &tok) in input.pred_inputs.iter().enumerate() {
            picks.push(self.pred_picks(p, tok)?);
        }
        Ok(picks)
    }

    /// Sum of token, quantizer-offset and segment embeddings for every
    /// position. With `cfg_masked`, conditioning positions keep only their
    /// segment embedding.
    pub fn embed(&self, g: &mut Graph, input: &StageInput) -> Result<(Var, SequenceLayout)> {
        let picks = self.embed_picks(input)?;
        let tables = self.table_ids().into_iter().map(|id| g.param(&self.params, id)).collect();
        Ok((g.gather_sum(tables, picks)?, input.layout()))
    }

    /// Logits `[N, V_p]` for every prediction-span position.
    pub fn forward(&self, g: &mut Graph, input: &StageInput) -> Result<Var> {
        let (x, layout) = self.embed(g, input)?;
        let span = layout.prediction();
        self.forward_embedded(g, x, span.start, span.len)
    }

    /// Transformer stack over pre-embedded rows `x: [T, d]`; returns routed
    /// logits for rows `pred_start..pred_start + pred_len`.
    pub fn forward_embedded(&self, g: &mut Graph, x: Var, pred_start: usize, pred_len: usize) -> Result<Var> {
        let h = self.hidden(g, x)?;
        let t = g.value(h).dims2()?.0;
        if pred_len == 0 || pred_start + pred_len > t {
            return Err(Error::invalid(format!(
                "prediction span {pred_start}..{} outside a sequence of {t}",
                pred_start + pred_len
            )));
        }
        self.route_heads(g, h, pred_start, pred_len)
    }

    /// Final-normalized hidden states `[T, d]`.
    pub fn hidden(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let (t, d) = g.value(x).dims2()?;
        if d != cfg.d_model || t == 0 {
            return Err(Error::shape("embedded input", &[t, d], &[t.max(1), cfg.d_model]));
        }
        let dk = cfg.d_k();
        let table = g.param(&self.params, self.ids.rel_bias);
        let buckets = (0..t).map(|dist| self.bucket(dist)).collect();
        // Built once and shared by every layer.
        let bias = g.relpos_bias(table, buckets)?;
        for b in &self.ids.blocks {
            let p = |g: &mut Graph, id| g.param(&self.params, id);
            let attn_norm = p(g, b.attn_norm);
            let h = g.rmsnorm(x, attn_norm, d, RMS_EPS)?;
            let wqkv = p(g, b.wqkv);
            let qkv = g.matmul(h, wqkv)?;
            let q = g.slice_cols(qkv, 0, d)?;
            let k = g.slice_cols(qkv, d, d)?;
            let v = g.slice_cols(qkv, 2 * d, d)?;
            let gq = p(g, b.q_norm);
            let gk = p(g, b.k_norm);
            let q = g.rmsnorm(q, gq, dk, RMS_EPS)?;
            let k = g.rmsnorm(k, gk, dk, RMS_EPS)?;
            let a = g.causal_attention(q, k, v, bias, cfg.heads)?;
            let wo = p(g, b.wo);
            let o = g.matmul(a, wo)?;
            x = g.add(x, o)?;

            let ffn_norm = p(g, b.ffn_norm);
            let h = g.rmsnorm(x, ffn_norm, d, RMS_EPS)?;
            let w1 = p(g, b.w1);
            let w2 = p(g, b.w2);
            let w3 = p(g, b.w3);
            let gate = g.matmul(h, w1)?;
            let gate = g.gelu(gate);
            let val = g.matmul(h, w2)?;
            let inner = g.mul(gate, val)?;
            let f = g.matmul(inner, w3)?;
            x = g.add(x, f)?;
        }
        let gf = g.param(&self.params, self.ids.final_norm);
        g.rmsnorm(x, gf, d, RMS_EPS)
    }

    fn route_heads(&self, g: &mut Graph, h: Var, start: usize, len: usize) -> Result<Var> {
        let q = self.cfg.q_pred;
        let mut groups = Vec::with_capacity(q);
        for head in 0..q.min(len) {
            let rows: Vec<usize> = (head..len).step_by(q).map(|p| start + p).collect();
            let sel = g.select_rows(h, rows)?;
            let w = g.param(&self.params, self.ids.heads[head]);
            groups.push(g.matmul(sel, w)?);
        }
        if q == 1 {
            return Ok(groups[0]);
        }
        let picks = (0..len).map(|p| vec![(p % q, p / q)]).collect();
        g.gather_sum(groups, picks)
    }

    pub(crate) fn bucket(&self, dist: usize) -> usize {
        self.buckets.get(dist).copied().unwrap_or(self.cfg.num_buckets - 1)
    }
}

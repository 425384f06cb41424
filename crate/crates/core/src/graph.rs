//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive operation in execution order. Node
//! indices are therefore a topological order, and [`Graph::backward`] replays
//! them in reverse, visiting each node once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, Exec};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }
}

/// Gradient accumulators aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params.values.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.grads.iter().map(Vec::as_slice)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.grads.iter_mut()
    }

    pub fn reset(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// `self += other`, entry by entry.
    pub fn add(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-node gradients from a single backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        group: usize,
        inv_rms: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherSum {
        tables: Vec<Var>,
        picks: Vec<Vec<(usize, usize)>>,
    },
    RelposBias {
        table: Var,
        bucket_by_distance: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        heads: usize,
        /// `[T, heads, T]`, zero above the diagonal.
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Forward values are immutable once recorded.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::Auto)
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; its gradient flows into a
    /// [`GradBuffer`] on [`Graph::backward_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let c = kernels::matmul(self.exec, self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| kernels::gelu(x)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Row-wise softmax over the last axis. `-inf` entries act as masks.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = self.value(a).data().to_vec();
        for (row, chunk) in data.chunks_mut(n.max(1)).enumerate().take(m) {
            if !kernels::softmax_in_place(chunk) {
                return Err(Error::DegenerateMask { row });
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::SoftmaxRows(a), rg))
    }

    /// RMSNorm over consecutive column groups of width `group`; `gain` has one
    /// entry per column. `group == cols` is ordinary RMSNorm.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, group: usize, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).len() != n || group == 0 || n % group != 0 {
            return Err(Error::shape("rmsnorm", self.value(x).shape(), self.value(gain).shape()));
        }
        let mut out = vec![0.0; m * n];
        let mut inv_rms = Vec::with_capacity(m * n / group);
        {
            let xv = self.value(x).data();
            let gv = self.value(gain).data();
            for (i, row) in out.chunks_mut(n).enumerate() {
                kernels::rmsnorm_groups(&xv[i * n..(i + 1) * n], gv, group, eps, row, &mut inv_rms);
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::RmsNorm {
                x,
                gain,
                group,
                inv_rms,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::invalid(format!(
                "column slice {start}..{} out of {n}",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let data: Vec<f64> = (0..m)
            .flat_map(|i| xv[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::invalid(format!("row {bad} out of {m}")));
        }
        let xv = self.value(x).data();
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|&r| xv[r * n..(r + 1) * n].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], data)?,
            Op::SelectRows { x, rows },
            rg,
        ))
    }

    /// Output row `i` is the sum of `tables[t][r]` over `(t, r)` in `picks[i]`,
    /// accumulated in list order starting from zero. Rows with no picks are 0.
    pub fn gather_sum(&mut self, tables: Vec<Var>, picks: Vec<Vec<(usize, usize)>>) -> Result<Var> {
        let d = match tables.first() {
            Some(&t) => self.value(t).dims2()?.1,
            None => return Err(Error::invalid("gather_sum needs at least one table")),
        };
        for &t in &tables {
            let (_, c) = self.value(t).dims2()?;
            if c != d {
                return Err(Error::shape("gather_sum", &[d], self.value(t).shape()));
            }
        }
        let mut out = vec![0.0; picks.len() * d];
        for (row, pick) in out.chunks_mut(d).zip(&picks) {
            for &(t, r) in pick {
                let tv = self.value(tables[t]);
                let rows = tv.shape()[0];
                if r >= rows {
                    return Err(Error::IdOutOfRange { id: r, vocab: rows });
                }
                kernels::axpy(1.0, tv.row(r), row);
            }
        }
        let rg = tables.iter().any(|&t| self.rg(t));
        Ok(self.push(
            Tensor::new(vec![picks.len(), d], out)?,
            Op::GatherSum { tables, picks },
            rg,
        ))
    }

    /// Expand a `[buckets, heads]` table into a `[heads, T, T]` causal bias.
    /// Entry `(h, q, k)` is `table[bucket_by_distance[q - k], h]` for `k <= q`
    /// and `-inf` above the diagonal.
    pub fn relpos_bias(&mut self, table: Var, bucket_by_distance: Vec<usize>) -> Result<Var> {
        let (nb, heads) = self.value(table).dims2()?;
        if let Some(&b) = bucket_by_distance.iter().find(|&&b| b >= nb) {
            return Err(Error::IdOutOfRange { id: b, vocab: nb });
        }
        let t = bucket_by_distance.len();
        let tv = self.value(table).data();
        let mut out = vec![f64::NEG_INFINITY; heads * t * t];
        for h in 0..heads {
            for q in 0..t {
                for k in 0..=q {
                    out[(h * t + q) * t + k] = tv[bucket_by_distance[q - k] * heads + h];
                }
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![heads, t, t], out)?,
            Op::RelposBias {
                table,
                bucket_by_distance,
            },
            rg,
        ))
    }

    /// Multi-head causal attention: `softmax(q kᵀ / √d_k + bias) v` per head,
    /// heads laid out as consecutive column blocks of width `d / heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, bias: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.value(q).dims2()?;
        for other in [k, v] {
            if self.value(other).shape() != [t, d] {
                return Err(Error::shape("attention", &[t, d], self.value(other).shape()));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{d} columns do not split into {heads} heads")));
        }
        if self.value(bias).shape() != [heads, t, t] {
            return Err(Error::shape("attention bias", &[heads, t, t], self.value(bias).shape()));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; t * d];
        let mut probs = vec![0.0; t * heads * t];
        {
            let qv = self.value(q).data();
            let kv = self.value(k).data();
            let vv = self.value(v).data();
            let bv = self.value(bias).data();
            for_each_row_pair(self.exec, &mut out, d, &mut probs, heads * t, t * t * d, |i, orow, prow| {
                for h in 0..heads {
                    kernels::attend_row(
                        &qv[i * d + h * dk..i * d + (h + 1) * dk],
                        kv,
                        vv,
                        d,
                        h * dk,
                        i,
                        &bv[(h * t + i) * t..(h * t + i + 1) * t],
                        scale,
                        &mut prow[h * t..(h + 1) * t],
                        &mut orow[h * dk..(h + 1) * dk],
                    );
                }
            });
        }
        let rg = [q, k, v, bias].iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::new(vec![t, d], out)?,
            Op::CausalAttention {
                q,
                k,
                v,
                bias,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over positions with `mask[t]` set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (m, v) = self.value(logits).dims2()?;
        if targets.len() != m || mask.len() != m {
            return Err(Error::shape("cross_entropy", &[m, v], &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::invalid("cross entropy over zero unmasked positions"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            let tgt = targets[i];
            if tgt >= v {
                return Err(Error::IdOutOfRange { id: tgt, vocab: v });
            }
            let row = &lv[i * v..(i + 1) * v];
            let lse = kernels::log_sum_exp(row);
            total += lse - row[tgt];
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.backward_scaled(root, 1.0)
    }

    /// Backward pass whose parameter gradients, multiplied by `scale`, are
    /// added to `buf`. Repeated calls accumulate.
    pub fn backward_into(&self, root: Var, scale: f64, buf: &mut GradBuffer) -> Result<()> {
        let grads = self.backward_scaled(root, scale)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                buf.grads[id.0]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    fn backward_scaled(&self, root: Var, seed: f64) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![seed]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let exec = self.exec;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = self.value(*b).shape()[1];
                if self.rg(*a) {
                    let da = kernels::matmul_nt(exec, g, self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, |dst| add_into(dst, &da));
                }
                if self.rg(*b) {
                    let db = kernels::matmul_tn(exec, self.value(*a).data(), g, m, k, n);
                    self.acc(grads, *b, |dst| add_into(dst, &db));
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.rg(x) {
                        self.acc(grads, x, |dst| add_into(dst, g));
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    self.acc(grads, *a, |dst| {
                        for ((d, gi), bi) in dst.iter_mut().zip(g).zip(bv) {
                            *d += gi * bi;
                        }
                    });
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    self.acc(grads, *b, |dst| {
                        for ((d, gi), ai) in dst.iter_mut().zip(g).zip(av) {
                            *d += gi * ai;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |dst| kernels::axpy(*c, g, dst));
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |dst| dst.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |dst| {
                    for ((d, gi), &x) in dst.iter_mut().zip(g).zip(av) {
                        *d += gi * kernels::gelu_grad(x);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                self.acc(grads, *a, |dst| {
                    for ((dr, gr), yr) in dst.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s = kernels::dot(gr, yr);
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - s);
                        }
                    }
                });
            }
            Op::RmsNorm {
                x,
                gain,
                group,
                inv_rms,
            } => {
                let n = node.value.shape()[1];
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let group = *group;
                if self.rg(*gain) {
                    self.acc(grads, *gain, |dst| {
                        for (row, (xr, gr)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d += gr[j] * xr[j] * inv_rms[row * (n / group) + j / group];
                            }
                        }
                    });
                }
                if self.rg(*x) {
                    self.acc(grads, *x, |dst| {
                        let mut gi = 0;
                        for ((dr, xr), gr) in dst.chunks_mut(n).zip(xv.chunks(n)).zip(g.chunks(n)) {
                            for ((dc, xc), (gc, gain_c)) in dr
                                .chunks_mut(group)
                                .zip(xr.chunks(group))
                                .zip(gr.chunks(group).zip(gv.chunks(group)))
                            {
                                let r = inv_rms[gi];
                                gi += 1;
                                let s: f64 = gc.iter().zip(gain_c).zip(xc).map(|((a, b), c)| a * b * c).sum();
                                let coef = r * r * r * s / group as f64;
                                for j in 0..group {
                                    dc[j] += r * gain_c[j] * gc[j] - xc[j] * coef;
                                }
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                let (m, len) = node.value.dims2().expect("matrix");
                let n = self.value(*x).shape()[1];
                self.acc(grads, *x, |dst| {
                    for r in 0..m {
                        add_into(&mut dst[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let n = node.value.shape()[1];
                self.acc(grads, *x, |dst| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut dst[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::GatherSum { tables, picks } => {
                let d = node.value.shape()[1];
                for (ti, &table) in tables.iter().enumerate() {
                    if !self.rg(table) {
                        continue;
                    }
                    self.acc(grads, table, |dst| {
                        for (row, pick) in picks.iter().enumerate() {
                            for &(t, r) in pick {
                                if t == ti {
                                    add_into(&mut dst[r * d..(r + 1) * d], &g[row * d..(row + 1) * d]);
                                }
                            }
                        }
                    });
                }
            }
            Op::RelposBias {
                table,
                bucket_by_distance,
            } => {
                let heads = self.value(*table).shape()[1];
                let t = bucket_by_distance.len();
                self.acc(grads, *table, |dst| {
                    for h in 0..heads {
                        for q in 0..t {
                            for k in 0..=q {
                                dst[bucket_by_distance[q - k] * heads + h] += g[(h * t + q) * t + k];
                            }
                        }
                    }
                });
            }
            Op::CausalAttention {
                q,
                k,
                v,
                bias,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *bias, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).shape()[1];
                let s = g[0] / *count as f64;
                self.acc(grads, *logits, |dst| {
                    for (i, (&tgt, &on)) in targets.iter().zip(mask).enumerate() {
                        if !on {
                            continue;
                        }
                        let row = &mut dst[i * v..(i + 1) * v];
                        kernels::axpy(s, &probs[i * v..(i + 1) * v], row);
                        row[tgt] -= s;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (t, d) = self.value(q).dims2().expect("matrix");
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let exec = self.exec;
        let work = t * t * d;

        // Score gradients and query gradients, one query row at a time.
        let mut ds = vec![0.0; t * heads * t];
        let mut dq = vec![0.0; t * d];
        for_each_row_pair(exec, &mut dq, d, &mut ds, heads * t, work, |i, dq_row, ds_row| {
            for h in 0..heads {
                let go = &g[i * d + h * dk..i * d + (h + 1) * dk];
                let p = &probs[(i * heads + h) * t..(i * heads + h) * t + i + 1];
                let dsr = &mut ds_row[h * t..h * t + i + 1];
                let mut s = 0.0;
                for j in 0..=i {
                    let dp = kernels::dot(go, &vv[j * d + h * dk..j * d + (h + 1) * dk]);
                    dsr[j] = dp;
                    s += p[j] * dp;
                }
                for j in 0..=i {
                    dsr[j] = p[j] * (dsr[j] - s);
                }
                let dqh = &mut dq_row[h * dk..(h + 1) * dk];
                for j in 0..=i {
                    kernels::axpy(dsr[j] * scale, &kv[j * d + h * dk..j * d + (h + 1) * dk], dqh);
                }
            }
        });

        // Key and value gradients, one key row at a time, queries ascending.
        let mut dkey = vec![0.0; t * d];
        let mut dval = vec![0.0; t * d];
        for_each_row_pair(exec, &mut dkey, d, &mut dval, d, work, |j, dk_row, dv_row| {
            for h in 0..heads {
                let dkh = &mut dk_row[h * dk..(h + 1) * dk];
                for i in j..t {
                    let w = ds[(i * heads + h) * t + j] * scale;
                    kernels::axpy(w, &qv[i * d + h * dk..i * d + (h + 1) * dk], dkh);
                }
                let dvh = &mut dv_row[h * dk..(h + 1) * dk];
                for i in j..t {
                    let p = probs[(i * heads + h) * t + j];
                    kernels::axpy(p, &g[i * d + h * dk..i * d + (h + 1) * dk], dvh);
                }
            }
        });

        if self.rg(q) {
            self.acc(grads, q, |dst| add_into(dst, &dq));
        }
        if self.rg(k) {
            self.acc(grads, k, |dst| add_into(dst, &dkey));
        }
        if self.rg(v) {
            self.acc(grads, v, |dst| add_into(dst, &dval));
        }
        if self.rg(bias) {
            self.acc(grads, bias, |dst| {
                for h in 0..heads {
                    for i in 0..t {
                        for j in 0..=i {
                            dst[(h * t + i) * t + j] += ds[(i * heads + h) * t + j];
                        }
                    }
                }
            });
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: impl FnOnce(&mut [f64])) {
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.len()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Like [`kernels::for_each_row`] over two buffers split in lockstep.
fn for_each_row_pair<F>(exec: Exec, a: &mut [f64], a_len: usize, b: &mut [f64], b_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Auto && work >= 1 << 16 {
        use rayon::prelude::*;
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (ra, rb))| f(i, ra, rb));
        return;
    }
    let _ = (exec, work);
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (ra, rb))| f(i, ra, rb));
}

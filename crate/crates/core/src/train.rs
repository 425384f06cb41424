//! Teacher-forced stage training: guidance dropout, per-quantizer loss,
//! AdamW with warmup and cosine decay, global-norm clipping and gradient
//! accumulation.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::draw_crop_window;
use crate::error::{Error, Result};
use crate::graph::{GradBuffer, Graph, ParamStore, Var};
use crate::model::Model;
use crate::rng;
use crate::stages::{build_train_sequence, stage_spec_with, PairTokens, StageIOSpec, StageKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub clip_s: f64,
    pub total_steps: usize,
    pub grad_accum: usize,
    pub p_drop: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    /// Defaults to 4000, or `max(100, total_steps / 25)` for runs shorter
    /// than 4000 steps.
    pub warmup_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Emit a checkpoint every this many steps (the final one is always emitted).
    pub checkpoint_every: Option<usize>,
    /// Stop once the mean conditional loss over the whole training set drops
    /// below this value, checked every `eval_every` steps.
    pub stop_below: Option<f64>,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            clip_s: 10.0,
            total_steps: 100_000,
            grad_accum: 1,
            p_drop: 0.1,
            peak_lr: 3e-4,
            min_lr: 1e-6,
            warmup_steps: None,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: None,
            stop_below: None,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(if self.total_steps >= 4000 {
            4000
        } else {
            (self.total_steps / 25).max(100)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.batch_size == 0 || self.grad_accum == 0 || self.total_steps == 0 {
            return bad("batch_size, grad_accum and total_steps must be positive".into());
        }
        if self.warmup() >= self.total_steps {
            return bad(format!(
                "warmup ({}) must be shorter than total_steps ({})",
                self.warmup(),
                self.total_steps
            ));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad(format!("p_drop {} outside [0, 1]", self.p_drop));
        }
        if !(self.clip_s > 0.0) {
            return bad(format!("clip_s must be positive, got {}", self.clip_s));
        }
        if !(self.peak_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.peak_lr {
            return bad("learning rates must satisfy 0 <= min_lr <= peak_lr, peak_lr > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must be in [0, 1) and eps positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("weight_decay must be non-negative and clip_norm positive".into());
        }
        if self.eval_every == 0 || self.checkpoint_every == Some(0) {
            return bad("eval_every and checkpoint_every must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to the minimum at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup();
    if step <= warmup {
        return cfg.peak_lr * (step as f64 / warmup as f64);
    }
    let progress = ((step - warmup) as f64 / (cfg.total_steps - warmup) as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (PI * progress).cos())
}

/// Independent Bernoulli(`p_drop`) flags.
pub fn cfg_dropout_mask<R: Rng + ?Sized>(n: usize, p_drop: f64, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| rng.gen::<f64>() < p_drop).collect()
}

/// Mean over quantizers of the mean NLL of that quantizer's positions
/// (position `t` belongs to quantizer `t mod q_pred`).
pub fn stage_loss(g: &mut Graph, logits: Var, targets: &[u32], q_pred: usize) -> Result<Var> {
    let (n, _) = g.value(logits).dims2()?;
    if targets.len() != n || q_pred == 0 {
        return Err(Error::invalid(format!(
            "{} targets for {n} logit rows (q_pred = {q_pred})",
            targets.len()
        )));
    }
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let groups = q_pred.min(n);
    let mut total: Option<Var> = None;
    for q in 0..groups {
        let mask: Vec<bool> = (0..n).map(|t| t % q_pred == q).collect();
        let l = g.cross_entropy(logits, &targets, &mask)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty prediction span"))?;
    Ok(g.scale(total, 1.0 / groups as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn matches(&self, params: &ParamStore) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, _, t), (m, v))| m.len() == t.len() && v.len() == t.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update. Weight decay scales each parameter by `1 − lr·wd`
/// before the bias-corrected adaptive step is subtracted. A non-finite
/// gradient rejects the whole step without touching any state.
pub fn adamw_step(params: &mut ParamStore, grads: &GradBuffer, state: &mut OptimizerState, lr: f64, opt: AdamW) -> Result<()> {
    if !state.matches(params) {
        return Err(Error::invalid("optimizer state does not match the parameters"));
    }
    if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of {}", params.name(crate::graph::ParamId(i)))));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - lr * opt.weight_decay;
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * gi;
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x = *x * decay - lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradBuffer, max_norm: f64) -> Result<f64> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub enum TrainEvent<'a> {
    Step(&'a StepLog),
    Checkpoint {
        step: usize,
        model: &'a Model,
        opt: &'a OptimizerState,
    },
    Evaluated { step: usize, loss: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<StepLog>,
    /// Set when training stopped at the `stop_below` target.
    pub stopped_at: Option<(usize, f64)>,
}

/// The stage layout with vocabularies taken from the model.
pub fn model_stage_spec(model: &Model, kind: StageKind) -> StageIOSpec {
    let mc = model.config();
    let mut spec = stage_spec_with(kind, mc.cond[0].vocab, mc.pred_vocab);
    for (c, m) in spec.cond.iter_mut().zip(&mc.cond) {
        c.vocab = m.vocab;
    }
    spec
}

/// Position of item `k` in an epoch-by-epoch shuffled walk over `n` examples.
fn data_index(seed: u64, n: usize, k: usize) -> usize {
    let epoch = k / n;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &format!("data/epoch-{epoch}")));
    order[k % n]
}

/// Trains one stage model. All randomness comes from named streams keyed by
/// the run seed and the optimizer step, so a resumed run and a run with a
/// different accumulation split see the same examples, crops and dropout
/// flags.
pub struct Trainer {
    pub kind: StageKind,
    pub spec: StageIOSpec,
    pub model: Model,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(kind: StageKind, model: Model, cfg: TrainConfig) -> Result<Self> {
        let opt = OptimizerState::new(model.params());
        Self::resume(kind, model, opt, cfg)
    }

    pub fn resume(kind: StageKind, model: Model, opt: OptimizerState, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = model_stage_spec(&model, kind);
        if !opt.matches(model.params()) {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        Ok(Self {
            kind,
            spec,
            model,
            opt,
            cfg,
        })
    }

    pub fn step(&self) -> usize {
        self.opt.step as usize
    }

    /// Sequences of the next optimizer step, in item order.
    fn batch(&self, data: &[PairTokens], step: usize) -> Result<Vec<(crate::stages::TrainSequence, usize)>> {
        let n = self.cfg.batch_size * self.cfg.grad_accum;
        let mut crop_rng = rng::stream(self.cfg.seed, &format!("crop/{step}"));
        let mut drop_rng = rng::stream(self.cfg.seed, &format!("cfg-dropout/{step}"));
        let dropped = cfg_dropout_mask(n, self.cfg.p_drop, &mut drop_rng);
        let mut out = Vec::with_capacity(n);
        for (j, &masked) in dropped.iter().enumerate() {
            let idx = data_index(self.cfg.seed, data.len(), step * n + j);
            let pair = &data[idx];
            let w = draw_crop_window(
                pair.vocal_semantic.frame_rate,
                pair.vocal_semantic.len(),
                pair.coarse.frame_rate,
                pair.coarse.num_frames(),
                self.cfg.clip_s,
                &mut crop_rng,
            )?;
            let (cond, target) = pair.crop(&w)?.stage_io(self.kind);
            out.push((build_train_sequence(&self.spec, &cond, &target, masked)?, idx));
        }
        Ok(out)
    }

    /// One optimizer step.
    pub fn train_step(&mut self, data: &[PairTokens]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let step = self.step();
        let items = self.batch(data, step)?;
        let denom = (self.cfg.batch_size * self.cfg.grad_accum) as f64;
        let model = &self.model;
        let q = self.spec.q_pred;
        let per_item = |seq: &crate::stages::TrainSequence| -> Result<(f64, GradBuffer)> {
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &seq.input)?;
            let loss = stage_loss(&mut g, logits, &seq.targets, q)?;
            let mut buf = GradBuffer::zeros_like(model.params());
            // Micro-batch mean, scaled by 1/accumulation.
            g.backward_into(loss, 1.0 / denom, &mut buf)?;
            Ok((g.value(loss).item(), buf))
        };
        #[cfg(feature = "parallel")]
        let results: Vec<Result<(f64, GradBuffer)>> = {
            use rayon::prelude::*;
            items.par_iter().map(|(s, _)| per_item(s)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<Result<(f64, GradBuffer)>> = items.iter().map(|(s, _)| per_item(s)).collect();

        let mut grads = GradBuffer::zeros_like(self.model.params());
        let mut loss_sum = 0.0;
        for r in results {
            let (l, b) = r?;
            loss_sum += l;
            grads.add(&b);
        }
        let loss = loss_sum / denom;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: step + 1 });
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm).map_err(|_| Error::Diverged { step: step + 1 })?;
        let lr = lr_at(step + 1, &self.cfg);
        adamw_step(self.model.params_mut(), &grads, &mut self.opt, lr, AdamW::from(&self.cfg))?;
        Ok(StepLog {
            step: step + 1,
            lr,
            loss,
            grad_norm,
        })
    }

    /// Train until `total_steps` (or the `stop_below` target).
    pub fn run(&mut self, data: &[PairTokens], on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>) -> Result<TrainOutcome> {
        let mut history = Vec::new();
        let mut stopped_at = None;
        while self.step() < self.cfg.total_steps {
            let log = self.train_step(data)?;
            on_event(TrainEvent::Step(&log))?;
            history.push(log);
            let s = log.step;
            if self.cfg.checkpoint_every.is_some_and(|n| s % n == 0) && s < self.cfg.total_steps {
                on_event(TrainEvent::Checkpoint {
                    step: s,
                    model: &self.model,
                    opt: &self.opt,
                })?;
            }
            if let Some(target) = self.cfg.stop_below {
                if s % self.cfg.eval_every == 0 {
                    let loss = dataset_loss(&self.model, self.kind, data, self.cfg.clip_s)?;
                    on_event(TrainEvent::Evaluated { step: s, loss })?;
                    if loss < target {
                        stopped_at = Some((s, loss));
                        break;
                    }
                }
            }
        }
        on_event(TrainEvent::Checkpoint {
            step: self.step(),
            model: &self.model,
            opt: &self.opt,
        })?;
        Ok(TrainOutcome { history, stopped_at })
    }
}

/// Mean stage loss with conditioning intact over the leading `clip_s`
/// seconds of every example.
pub fn dataset_loss(model: &Model, kind: StageKind, data: &[PairTokens], clip_s: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let spec = model_stage_spec(model, kind);
    let one = |pair: &PairTokens| -> Result<f64> {
        let w = leading_window(pair, clip_s)?;
        let (cond, target) = pair.crop(&w)?.stage_io(kind);
        let seq = build_train_sequence(&spec, &cond, &target, false)?;
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &seq.input)?;
        let l = stage_loss(&mut g, logits, &seq.targets, spec.q_pred)?;
        Ok(g.value(l).item())
    };
    #[cfg(feature = "parallel")]
    let losses: Vec<Result<f64>> = {
        use rayon::prelude::*;
        data.par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let losses: Vec<Result<f64>> = data.iter().map(one).collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / data.len() as f64)
}

/// The first `clip_s` seconds of a pair, or the whole pair if it is shorter.
pub fn leading_window(pair: &PairTokens, clip_s: f64) -> Result<crate::codec::CropWindow> {
    let tick = 25u32;
    let avail = (pair.vocal_semantic.len() / 2).min(pair.coarse.num_frames() / 3);
    let want = (clip_s * tick as f64).round() as usize;
    if pair.vocal_semantic.frame_rate != 50 || pair.coarse.frame_rate != 75 {
        return Err(Error::invalid("pair streams must be at 50 Hz and 75 Hz"));
    }
    Ok(crate::codec::CropWindow {
        tick_rate: tick,
        offset_ticks: 0,
        len_ticks: want.min(avail),
    })
}

/// Train `model` on `data` from scratch and return it with its loss history.
pub fn train_stage(kind: StageKind, data: &[PairTokens], model: Model, cfg: TrainConfig) -> Result<(Model, TrainOutcome)> {
    let mut t = Trainer::new(kind, model, cfg)?;
    let outcome = t.run(data, &mut |_| Ok(())).map_err(|e| e.in_stage(kind.name()))?;
    Ok((t.model, outcome))
}

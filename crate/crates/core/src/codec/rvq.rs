//! Residual vector quantization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Exec;
use crate::rng;
use crate::tensor::Tensor;

use super::kmeans::{kmeans_fit, Codebook};
use super::tokens::CodeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvqCodec {
    pub stages: Vec<Codebook>,
}

impl RvqCodec {
    pub fn new(stages: Vec<Codebook>) -> Result<Self> {
        let Some(first) = stages.first() else {
            return Err(Error::invalid("RVQ codec needs at least one stage"));
        };
        if stages.iter().any(|s| s.dim != first.dim) {
            return Err(Error::invalid("RVQ stages must share one dimension"));
        }
        Ok(Self { stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn dim(&self) -> usize {
        self.stages[0].dim
    }

    /// Largest stage vocabulary.
    pub fn vocab(&self) -> usize {
        self.stages.iter().map(|s| s.k).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqFit {
    pub codec: RvqCodec,
    /// Mean squared residual norm before any stage (index 0) and after each
    /// stage (index `q + 1`).
    pub residual_energy: Vec<f64>,
}

fn mean_energy(data: &[f64], n: usize) -> f64 {
    data.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64
}

/// Fit `num_stages` codebooks of `k` entries, each on the residual left by
/// the previous stages.
pub fn rvq_fit(frames: &Tensor, num_stages: usize, k: usize, max_iters: usize, seed: u64) -> Result<RvqFit> {
    let (n, dim) = frames.dims2()?;
    if num_stages == 0 {
        return Err(Error::invalid("RVQ needs at least one stage"));
    }
    let mut residual = frames.data().to_vec();
    let mut energy = vec![mean_energy(&residual, n)];
    let mut stages = Vec::with_capacity(num_stages);
    for q in 0..num_stages {
        let r = Tensor::new(vec![n, dim], residual.clone())?;
        let fit = kmeans_fit(&r, k, max_iters, rng::derive_seed(seed, &format!("rvq-stage-{q}")))?;
        for (i, (c, _)) in fit.codebook.assign(&r, Exec::Auto)?.into_iter().enumerate() {
            for (x, cv) in residual[i * dim..(i + 1) * dim].iter_mut().zip(fit.codebook.centroid(c)) {
                *x -= cv;
            }
        }
        energy.push(mean_energy(&residual, n));
        stages.push(fit.codebook);
    }
    Ok(RvqFit {
        codec: RvqCodec::new(stages)?,
        residual_energy: energy,
    })
}

/// Greedy stage-wise encoding of every frame.
pub fn rvq_encode(frames: &Tensor, codec: &RvqCodec, frame_rate: u32) -> Result<CodeGrid> {
    let (n, dim) = frames.dims2()?;
    if dim != codec.dim() {
        return Err(Error::shape("rvq_encode", &[n, dim], &[codec.dim()]));
    }
    let mut residual = frames.data().to_vec();
    let mut ids = Vec::with_capacity(codec.num_stages() * n);
    for cb in &codec.stages {
        let r = Tensor::new(vec![n, dim], residual.clone())?;
        for (i, (c, _)) in cb.assign(&r, Exec::Auto)?.into_iter().enumerate() {
            ids.push(c as u32);
            for (x, cv) in residual[i * dim..(i + 1) * dim].iter_mut().zip(cb.centroid(c)) {
                *x -= cv;
            }
        }
    }
    CodeGrid::from_flat(frame_rate, codec.vocab(), codec.num_stages(), ids)
}

/// Sum of the selected centroids. A grid with fewer codebooks than the codec
/// decodes with that many leading stages.
pub fn rvq_decode(grid: &CodeGrid, codec: &RvqCodec) -> Result<Tensor> {
    let q = grid.num_codebooks();
    if q > codec.num_stages() {
        return Err(Error::invalid(format!(
            "grid has {q} codebooks but codec only {} stages",
            codec.num_stages()
        )));
    }
    let t = grid.num_frames();
    let dim = codec.dim();
    let mut out = vec![0.0; t * dim];
    for (stage, row) in grid.rows().enumerate() {
        let cb = &codec.stages[stage];
        for (f, &id) in row.iter().enumerate() {
            if id as usize >= cb.k {
                return Err(Error::IdOutOfRange {
                    id: id as usize,
                    vocab: cb.k,
                });
            }
            for (o, c) in out[f * dim..(f + 1) * dim].iter_mut().zip(cb.centroid(id as usize)) {
                *o += c;
            }
        }
    }
    Tensor::new(vec![t, dim], out)
}

//! Fréchet distance over toy token embeddings, and held-out perplexity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::codec::CodeGrid;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::stages::{build_train_sequence, PairTokens, StageKind};
use crate::train::{leading_window, model_stage_spec};

/// Hashed bigram bins appended to the histogram block.
pub const BIGRAM_BINS: usize = 64;

/// Eigenvalues down to this are treated as rounding noise and clamped to 0.
pub const PSD_TOLERANCE: f64 = 1e-6;

fn mix64(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn bigram_bin(codebook: usize, a: u32, b: u32) -> usize {
    let key = ((codebook as u64) << 48) ^ ((a as u64) << 24) ^ b as u64;
    (mix64(key) % BIGRAM_BINS as u64) as usize
}

pub fn embedding_dim(vocab: usize) -> usize {
    vocab + BIGRAM_BINS
}

/// One embedding per whole second of `grid`: the normalized histogram of all
/// ids in the window (`vocab` bins) followed by the normalized histogram of
/// hashed within-codebook bigrams (`BIGRAM_BINS` bins).
pub fn toy_embedder(grid: &CodeGrid) -> Result<Vec<Vec<f64>>> {
    if grid.num_frames() == 0 || grid.num_codebooks() == 0 {
        return Err(Error::invalid("cannot embed an empty token sequence"));
    }
    let rate = grid.frame_rate as usize;
    let v = grid.vocab;
    let windows = grid.num_frames() / rate;
    let one = |w: usize| -> Vec<f64> {
        let mut e = vec![0.0; embedding_dim(v)];
        let frames = w * rate..(w + 1) * rate;
        let mut n_tok = 0usize;
        let mut n_bi = 0usize;
        for (q, row) in grid.rows().enumerate() {
            let win = &row[frames.clone()];
            for &id in win {
                e[id as usize] += 1.0;
                n_tok += 1;
            }
            for pair in win.windows(2) {
                e[v + bigram_bin(q, pair[0], pair[1])] += 1.0;
                n_bi += 1;
            }
        }
        e[..v].iter_mut().for_each(|x| *x /= n_tok as f64);
        if n_bi > 0 {
            e[v..].iter_mut().for_each(|x| *x /= n_bi as f64);
        }
        e
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok((0..windows).into_par_iter().map(one).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok((0..windows).map(one).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::shape("gaussian stats", &[d, d], &[cov.nrows(), cov.ncols()]));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let s = GaussianStats { mean, cov };
        psd_sqrt(&s.cov)?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance.
pub fn embedding_stats(embeddings: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 embeddings, got {n}")));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::invalid("embeddings have different dimensions"));
    }
    let mut mean = DVector::zeros(d);
    for e in embeddings {
        mean += DVector::from_column_slice(e);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for e in embeddings {
        let c = DVector::from_column_slice(e) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    // Exact symmetry regardless of summation order.
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

/// Symmetric square root by eigendecomposition. Eigenvalues in
/// `[-PSD_TOLERANCE, 0)` clamp to zero; anything lower is an error.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::invalid(format!("matrix is not positive semi-definite (eigenvalue {v:e})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

fn psd_sqrt_trace(m: &DMatrix<f64>) -> Result<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut tr = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -PSD_TOLERANCE {
            return Err(Error::invalid(format!("matrix is not positive semi-definite (eigenvalue {v:e})")));
        }
        tr += v.max(0.0).sqrt();
    }
    Ok(tr)
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^½)`, with the trace of the root taken
/// from the symmetric form `Σa^½ Σb Σa^½`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", &[a.dim()], &[b.dim()]));
    }
    let dmu = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov)?;
    let s = &ra * &b.cov * &ra;
    let s = (&s + s.transpose()) * 0.5;
    let cross = psd_sqrt_trace(&s)?;
    Ok((dmu + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Stats of every toy-embedding window over a set of grids.
pub fn set_stats(grids: &[CodeGrid]) -> Result<(GaussianStats, usize)> {
    let mut all = Vec::new();
    for g in grids {
        all.extend(toy_embedder(g)?);
    }
    let n = all.len();
    Ok((embedding_stats(&all)?, n))
}

/// `exp` of the mean per-token NLL under teacher forcing with intact
/// conditioning, pooled over every target token of every held-out pair.
/// `train_ids` guards against evaluating on training examples.
pub fn token_perplexity(model: &Model, kind: StageKind, heldout: &[PairTokens], train_ids: &[String]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::invalid("empty held-out set"));
    }
    if let Some(p) = heldout.iter().find(|p| train_ids.contains(&p.id)) {
        return Err(Error::invalid(format!("held-out pair {} is also a training pair", p.id)));
    }
    let spec = model_stage_spec(model, kind);
    let mut nll = 0.0;
    let mut count = 0usize;
    for pair in heldout {
        let w = leading_window(pair, f64::INFINITY)?;
        let (cond, target) = pair.crop(&w)?.stage_io(kind);
        let seq = build_train_sequence(&spec, &cond, &target, false)?;
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &seq.input)?;
        let targets: Vec<usize> = seq.targets.iter().map(|&t| t as usize).collect();
        let l = g.cross_entropy(logits, &targets, &vec![true; targets.len()])?;
        nll += g.value(l).item() * targets.len() as f64;
        count += targets.len();
    }
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: &[f64], cov: &[f64]) -> GaussianStats {
        let d = mean.len();
        GaussianStats::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(d, d, cov)).unwrap()
    }

    #[test]
    fn frechet_examples() {
        let a = stats(&[0.0], &[1.0]);
        let b = stats(&[1.0], &[4.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-9);
        let c = stats(&[0.5, -1.0], &[2.0, 0.3, 0.3, 1.0]);
        assert!(frechet_distance(&c, &c).unwrap().abs() < 1e-9);
        let d = stats(&[1.5, 1.0], &[2.0, 0.3, 0.3, 1.0]);
        assert!((frechet_distance(&c, &d).unwrap() - 5.0).abs() < 1e-9);
        assert!(frechet_distance(&a, &c).is_err());
    }

    #[test]
    fn non_psd_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(GaussianStats::new(DVector::zeros(2), m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-9]);
        assert!(GaussianStats::new(DVector::zeros(2), m).is_ok());
    }

    #[test]
    fn stats_examples() {
        let s = embedding_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let s = embedding_stats(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(s.cov, DMatrix::zeros(2, 2));
        assert!(embedding_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn embedder_examples() {
        let g = CodeGrid::from_rows(50, 8, vec![vec![3; 125]]).unwrap();
        let e = toy_embedder(&g).unwrap();
        assert_eq!(e.len(), 2);
        for w in &e {
            assert_eq!(w.len(), 8 + BIGRAM_BINS);
            let mut one_hot = vec![0.0; 8];
            one_hot[3] = 1.0;
            assert_eq!(&w[..8], &one_hot[..]);
            assert!((w[8..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(toy_embedder(&CodeGrid::from_rows(50, 8, vec![vec![]]).unwrap()).is_err());
    }
}

//! Lloyd k-means and nearest-centroid quantization.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Exec;
use crate::rng;
use crate::tensor::Tensor;

use super::signal::FeatureStream;
use super::tokens::TokenStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if k == 0 || centroids.len() != k * dim {
            return Err(Error::invalid(format!(
                "codebook needs k >= 1 and k·dim = {} values, got k={k}, {}",
                k * dim,
                centroids.len()
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("codebook centroids".into()));
        }
        Ok(Self { k, dim, centroids })
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the closest centroid and its squared distance. Ties go to
    /// the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d: f64 = x
                .iter()
                .zip(self.centroid(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Nearest centroid for every row of `frames`, with squared distances.
    pub fn assign(&self, frames: &Tensor, exec: Exec) -> Result<Vec<(usize, f64)>> {
        let (n, dim) = frames.dims2()?;
        if dim != self.dim {
            return Err(Error::shape("quantize", &[n, dim], &[self.k, self.dim]));
        }
        Ok(assign_rows(self, frames.data(), n, exec))
    }
}

fn assign_rows(cb: &Codebook, data: &[f64], n: usize, exec: Exec) -> Vec<(usize, f64)> {
    let dim = cb.dim;
    #[cfg(feature = "parallel")]
    if exec == Exec::Auto && n * cb.k * dim >= 1 << 16 {
        use rayon::prelude::*;
        return (0..n)
            .into_par_iter()
            .map(|i| cb.nearest(&data[i * dim..(i + 1) * dim]))
            .collect();
    }
    let _ = exec;
    (0..n).map(|i| cb.nearest(&data[i * dim..(i + 1) * dim])).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansFit {
    pub codebook: Codebook,
    /// Mean squared distance after each assignment step.
    pub distortion: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's algorithm on the rows of `frames`.
///
/// Centroids start at `k` distinct frames drawn without replacement; an
/// empty cluster keeps its previous centroid. Stops at `max_iters` or when
/// assignments stop changing.
pub fn kmeans_fit(frames: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<KmeansFit> {
    kmeans_fit_with(frames, k, max_iters, seed, Exec::Auto)
}

pub fn kmeans_fit_with(frames: &Tensor, k: usize, max_iters: usize, seed: u64, exec: Exec) -> Result<KmeansFit> {
    let (n, dim) = frames.dims2()?;
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} frames is fewer than k = {k}")));
    }
    let data = frames.data();
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "kmeans-init"));
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if !chosen.iter().any(|&j| row(j) == row(i)) {
            chosen.push(i);
        }
    }
    // Fewer distinct values than k: pad with repeats.
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    let mut cb = Codebook::new(k, dim, chosen.iter().flat_map(|&i| row(i).iter().copied()).collect())?;

    let mut distortion = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut iterations = 0;
    loop {
        let assigned = assign_rows(&cb, data, n, exec);
        distortion.push(assigned.iter().map(|a| a.1).sum::<f64>() / n as f64);
        let new_labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        if new_labels == labels || iterations == max_iters {
            break;
        }
        labels = new_labels;
        iterations += 1;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    cb.centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(KmeansFit {
        codebook: cb,
        distortion,
        iterations,
    })
}

/// Nearest-centroid token ids for every frame of a feature stream.
pub fn quantize(frames: &FeatureStream, cb: &Codebook) -> Result<TokenStream> {
    let ids = cb
        .assign(&frames.frames, Exec::Auto)?
        .into_iter()
        .map(|(i, _)| i as u32)
        .collect();
    TokenStream::new(frames.frame_rate, cb.k, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn distinct_points_give_zero_distortion() {
        let pts = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![5.0, 5.0],
        ])
        .unwrap();
        let fit = kmeans_fit(&pts, 4, 50, 1).unwrap();
        assert_eq!(*fit.distortion.last().unwrap(), 0.0);
    }

    #[test]
    fn rejects_fewer_frames_than_k() {
        let pts = Tensor::zeros(&[3, 2]);
        assert!(kmeans_fit(&pts, 4, 10, 0).is_err());
    }

    #[test]
    fn distortion_never_increases() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..400 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let pts = Tensor::new(vec![400, 3], data).unwrap();
        let fit = kmeans_fit(&pts, 8, 100, 2).unwrap();
        assert!(fit.distortion.len() > 2);
        for w in fit.distortion.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.distortion);
        }
    }

    #[test]
    fn recovers_two_separated_clusters() {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        for i in 0..200 {
            let cx = if i % 2 == 0 { 0.0 } else { 10.0 };
            data.push(cx + normal.sample(&mut r));
            data.push(normal.sample(&mut r));
        }
        let pts = Tensor::new(vec![200, 2], data.clone()).unwrap();
        let fit = kmeans_fit(&pts, 2, 100, 3).unwrap();
        // Oracle: per-cluster sample means of the generating labels.
        let mean = |parity: usize| -> (f64, f64) {
            let rows: Vec<usize> = (0..200).filter(|i| i % 2 == parity).collect();
            let n = rows.len() as f64;
            (
                rows.iter().map(|&i| data[2 * i]).sum::<f64>() / n,
                rows.iter().map(|&i| data[2 * i + 1]).sum::<f64>() / n,
            )
        };
        for parity in 0..2 {
            let (mx, my) = mean(parity);
            let close = (0..2).any(|c| {
                let ct = fit.codebook.centroid(c);
                (ct[0] - mx).abs() < 0.5 && (ct[1] - my).abs() < 0.5
            });
            assert!(close, "cluster {parity} mean ({mx}, {my}) not matched: {:?}", fit.codebook);
        }
    }

    #[test]
    fn quantize_examples() {
        let cb = Codebook::new(3, 2, vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0]).unwrap();
        let frames = FeatureStream {
            frame_rate: 50,
            frames: Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0], vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap(),
        };
        let t = quantize(&frames, &cb).unwrap();
        // (1, 0) is equidistant from centroids 0 and 1.
        assert_eq!(t.ids, vec![1, 0, 2, 0]);
        let bad = FeatureStream {
            frame_rate: 50,
            frames: Tensor::zeros(&[1, 3]),
        };
        assert!(quantize(&bad, &cb).is_err());
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let k = 20;
        let dim = 5;
        let cb = Codebook::new(k, dim, (0..k * dim).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let frames: Vec<f64> = (0..300 * dim).map(|_| r.gen_range(-1.5..1.5)).collect();
        let fs = FeatureStream {
            frame_rate: 50,
            frames: Tensor::new(vec![300, dim], frames.clone()).unwrap(),
        };
        let ids = quantize(&fs, &cb).unwrap().ids;
        for (i, &id) in ids.iter().enumerate() {
            let x = &frames[i * dim..(i + 1) * dim];
            let dists: Vec<f64> = (0..k)
                .map(|c| (0..dim).map(|j| (x[j] - cb.centroids[c * dim + j]).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let want = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(id as usize, want);
        }
    }
}

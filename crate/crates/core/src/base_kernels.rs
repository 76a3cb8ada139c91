//! Layer-1 input kernels.
//!
//! A feature vector of dimension `d` is cut into `n1` disjoint contiguous
//! chunks of `d / n1` coefficients. For a pair of samples, chunk `q`
//! contributes one Gaussian similarity
//!
//! ```text
//! k_q(x, x') = exp(-||x_q - x'_q||^2 / sigma_q)
//! ```
//!
//! where `sigma_q` is the mean squared chunk distance between each sample
//! and its nearest neighbors. The resulting vector of `n1` values is the
//! input layer of a [`KernelNetwork`](crate::kernel_net::KernelNetwork).

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_K_NEIGHBORS: usize = 10;

/// Per-chunk Gaussian kernels over disjoint slices of a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    num_chunks: usize,
    chunk_size: usize,
    scales: Vec<f64>,
}

/// Result of bandwidth estimation. `degenerate_chunks` lists chunks whose
/// neighbor distances were all zero and therefore fell back to a unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleEstimate {
    pub scales: Vec<f64>,
    pub degenerate_chunks: Vec<usize>,
}

fn chunk_layout(dim: usize, num_chunks: usize) -> Result<usize> {
    if num_chunks == 0 || dim == 0 {
        return Err(Error::invalid("dimension and chunk count must be positive"));
    }
    if !dim.is_multiple_of(num_chunks) {
        return Err(Error::invalid(format!(
            "{num_chunks} chunks do not divide dimension {dim}"
        )));
    }
    Ok(dim / num_chunks)
}

impl KernelBank {
    pub fn new(num_chunks: usize, chunk_size: usize, scales: Vec<f64>) -> Result<Self> {
        if num_chunks == 0 || chunk_size == 0 {
            return Err(Error::invalid("chunk count and chunk size must be positive"));
        }
        if scales.len() != num_chunks {
            return Err(Error::invalid(format!(
                "expected {num_chunks} scales, got {}",
                scales.len()
            )));
        }
        if let Some(q) = scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!(
                "scale {q} must be positive and finite, got {}",
                scales[q]
            )));
        }
        Ok(Self {
            num_chunks,
            chunk_size,
            scales,
        })
    }

    /// Bank for `dim`-dimensional features with explicit scales.
    pub fn for_dim(dim: usize, scales: Vec<f64>) -> Result<Self> {
        let chunk_size = chunk_layout(dim, scales.len())?;
        Self::new(scales.len(), chunk_size, scales)
    }

    /// Estimate scales from `samples` and build the bank.
    pub fn fit(samples: &[Vec<f64>], num_chunks: usize, k_neighbors: usize) -> Result<(Self, ScaleEstimate)> {
        let est = estimate_scales(samples, num_chunks, k_neighbors)?;
        let dim = samples[0].len();
        let bank = Self::new(num_chunks, dim / num_chunks, est.scales.clone())?;
        Ok((bank, est))
    }

    pub fn num_chunks(&self) -> usize {
        self.num_chunks
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn dim(&self) -> usize {
        self.num_chunks * self.chunk_size
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// The vector of `n1` base kernel values for a pair of samples.
    pub fn base_kernel_vector(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d || y.len() != d {
            return Err(Error::invalid(format!(
                "expected dimension {d}, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        let mut out = vec![0.0; self.num_chunks];
        self.base_kernel_into(x, y, &mut out);
        Ok(out)
    }

    /// Unchecked variant writing into `out`; dimensions must already match.
    #[inline]
    pub fn base_kernel_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim());
        debug_assert_eq!(y.len(), self.dim());
        debug_assert_eq!(out.len(), self.num_chunks);
        for (q, (xc, yc)) in x
            .chunks_exact(self.chunk_size)
            .zip(y.chunks_exact(self.chunk_size))
            .enumerate()
        {
            out[q] = (-sq_dist(xc, yc) / self.scales[q]).exp();
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Per-chunk bandwidths from nearest neighbors.
///
/// Neighbors are found once in the full feature space (ties broken by lower
/// index); `sigma_q` is the mean over samples of the mean squared distance
/// restricted to chunk `q` between a sample and its `k_neighbors` neighbors.
pub fn estimate_scales(samples: &[Vec<f64>], num_chunks: usize, k_neighbors: usize) -> Result<ScaleEstimate> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot estimate scales from an empty dataset"));
    }
    if k_neighbors == 0 {
        return Err(Error::invalid("k_neighbors must be positive"));
    }
    if samples.len() < k_neighbors + 1 {
        return Err(Error::invalid(format!(
            "need at least {} samples for {k_neighbors} neighbors, got {}",
            k_neighbors + 1,
            samples.len()
        )));
    }
    let dim = samples[0].len();
    let chunk_size = chunk_layout(dim, num_chunks)?;
    if let Some(i) = samples.iter().position(|s| s.len() != dim) {
        return Err(Error::invalid(format!(
            "sample {i} has dimension {}, expected {dim}",
            samples[i].len()
        )));
    }

    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, xi)| {
            let mut dists: Vec<(f64, usize)> = samples
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, xj)| (sq_dist(xi, xj), j))
                .collect();
            let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            dists.select_nth_unstable_by(k_neighbors - 1, by_dist);
            let mut nn: Vec<usize> = dists[..k_neighbors].iter().map(|&(_, j)| j).collect();
            nn.sort_unstable();

            let mut chunk_means = vec![0.0; num_chunks];
            for &j in &nn {
                let xj = &samples[j];
                for (q, m) in chunk_means.iter_mut().enumerate() {
                    let r = q * chunk_size..(q + 1) * chunk_size;
                    *m += sq_dist(&xi[r.clone()], &xj[r]);
                }
            }
            for m in &mut chunk_means {
                *m /= k_neighbors as f64;
            }
            chunk_means
        })
        .collect();

    let mut scales = vec![0.0; num_chunks];
    for means in &per_sample {
        for (s, m) in scales.iter_mut().zip(means) {
            *s += m;
        }
    }
    let mut degenerate_chunks = Vec::new();
    for (q, s) in scales.iter_mut().enumerate() {
        *s /= samples.len() as f64;
        if !(*s > 0.0) || !s.is_finite() {
            degenerate_chunks.push(q);
            *s = 1.0;
        }
    }
    if !degenerate_chunks.is_empty() {
        warn!(
            "{} degenerate chunk(s) with zero neighbor distance; scale set to 1.0: {:?}",
            degenerate_chunks.len(),
            degenerate_chunks
        );
    }
    Ok(ScaleEstimate {
        scales,
        degenerate_chunks,
    })
}

//! Vector quantization: codebooks, nearest-entry search, the noise-substitution
//! surrogate, k-means initialization and dead-entry replacement.

mod kmeans;
mod nsvq;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use thiserror::Error;

pub use kmeans::{kmeans_init, KMeans, KMeansOptions};
pub use nsvq::{nsvq_backward, nsvq_forward, quantize_nsvq, NsvqSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VqError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("codebook must have at least one entry of dimension at least one")]
    EmptyCodebook,
    #[error("codebook storage of {len} values is not a multiple of dim {dim}")]
    Shape { len: usize, dim: usize },
    #[error("codebook entry {0} has a non-finite component")]
    NonFinite(usize),
    #[error("k-means needs at least one data point")]
    EmptyData,
}

/// Codebook vectors for one attribute group plus per-entry usage counters.
///
/// Counters are atomic so that concurrent quantization of a batch can record
/// usage through a shared reference.
#[derive(Debug)]
pub struct Codebook {
    dim: usize,
    vectors: Vec<f32>,
    usage: Vec<AtomicU64>,
}

impl Clone for Codebook {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            vectors: self.vectors.clone(),
            usage: self
                .usage
                .iter()
                .map(|u| AtomicU64::new(u.load(Ordering::Relaxed)))
                .collect(),
        }
    }
}

/// Equality is bitwise on the vectors; usage counters are training state and
/// do not participate.
impl PartialEq for Codebook {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.vectors.len() == other.vectors.len()
            && self
                .vectors
                .iter()
                .zip(&other.vectors)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub index: usize,
    pub hard: Vec<f32>,
    pub distance: f64,
}

impl Codebook {
    /// Build from row-major storage of `entries × dim` values.
    pub fn new(dim: usize, vectors: Vec<f32>) -> Result<Self, VqError> {
        if dim == 0 || vectors.is_empty() {
            return Err(VqError::EmptyCodebook);
        }
        if !vectors.len().is_multiple_of(dim) {
            return Err(VqError::Shape {
                len: vectors.len(),
                dim,
            });
        }
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(VqError::NonFinite(i / dim));
        }
        let entries = vectors.len() / dim;
        Ok(Self {
            dim,
            vectors,
            usage: (0..entries).map(|_| AtomicU64::new(0)).collect(),
        })
    }

    pub fn zeros(entries: usize, dim: usize) -> Result<Self, VqError> {
        Self::new(dim, vec![0.0; entries * dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> usize {
        self.usage.len()
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn vector_mut(&mut self, k: usize) -> &mut [f32] {
        &mut self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// Row-major storage.
    pub fn as_slice(&self) -> &[f32] {
        &self.vectors
    }

    pub fn usage(&self, k: usize) -> u64 {
        self.usage[k].load(Ordering::Relaxed)
    }

    pub fn usage_counts(&self) -> Vec<u64> {
        self.usage.iter().map(|u| u.load(Ordering::Relaxed)).collect()
    }

    pub fn record_use(&self, k: usize) {
        self.usage[k].fetch_add(1, Ordering::Relaxed);
    }

    pub fn reset_usage(&self) {
        for u in &self.usage {
            u.store(0, Ordering::Relaxed);
        }
    }

    /// Fraction of entries with a nonzero usage counter.
    pub fn active_fraction(&self) -> f64 {
        let active = self.usage.iter().filter(|u| u.load(Ordering::Relaxed) > 0).count();
        active as f64 / self.entries() as f64
    }

    fn check_dim(&self, got: usize) -> Result<(), VqError> {
        if got != self.dim {
            return Err(VqError::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    /// Index and squared distance of the nearest entry; ties go to the lowest
    /// index. Does not touch usage counters.
    pub fn nearest(&self, t: &[f32]) -> Result<(usize, f64), VqError> {
        self.check_dim(t.len())?;
        Ok(self.nearest_unchecked(t))
    }

    pub(crate) fn nearest_unchecked(&self, t: &[f32]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (k, z) in self.vectors.chunks_exact(self.dim).enumerate() {
            let mut d2 = 0.0f64;
            let mut pruned = false;
            for (a, b) in t.iter().zip(z) {
                let diff = f64::from(*a) - f64::from(*b);
                d2 += diff * diff;
                // partial sums only grow, and ties keep the earlier index
                if d2 >= best.1 {
                    pruned = true;
                    break;
                }
            }
            if !pruned {
                best = (k, d2);
            }
        }
        best
    }

    /// Hard quantization: nearest entry by Euclidean distance. Records one use.
    pub fn quantize_hard(&self, t: &[f32]) -> Result<QuantizationResult, VqError> {
        let (index, d2) = self.nearest(t)?;
        self.record_use(index);
        Ok(QuantizationResult {
            index,
            hard: self.vector(index).to_vec(),
            distance: d2.sqrt(),
        })
    }

    /// Overwrite every entry used fewer than `threshold` times with a copy of a
    /// uniformly drawn active entry, then reset all counters. Returns the
    /// number of replaced entries; nothing is replaced when no entry is active.
    pub fn replace_inactive<R: Rng + ?Sized>(&mut self, threshold: u64, rng: &mut R) -> usize {
        self.replace_inactive_with_jitter(threshold, 0.0, rng)
    }

    /// As [`Codebook::replace_inactive`], optionally adding uniform noise of
    /// half-width `jitter` to each copied component.
    pub fn replace_inactive_with_jitter<R: Rng + ?Sized>(&mut self, threshold: u64, jitter: f32, rng: &mut R) -> usize {
        let counts = self.usage_counts();
        let active: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] >= threshold).collect();
        let mut replaced = 0;
        if !active.is_empty() {
            for k in 0..counts.len() {
                if counts[k] >= threshold {
                    continue;
                }
                let src = active[rng.random_range(0..active.len())];
                let (dim, vectors) = (self.dim, &mut self.vectors);
                vectors.copy_within(src * dim..(src + 1) * dim, k * dim);
                if jitter > 0.0 {
                    for v in &mut vectors[k * dim..(k + 1) * dim] {
                        *v += rng.random_range(-jitter..=jitter);
                    }
                }
                replaced += 1;
            }
        }
        self.reset_usage();
        replaced
    }
}

/// Number of bits needed to address `entries` codebook rows.
pub fn index_bits(entries: usize) -> u32 {
    if entries <= 1 {
        0
    } else {
        usize::BITS - (entries - 1).leading_zeros()
    }
}

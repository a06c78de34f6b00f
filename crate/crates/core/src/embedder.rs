//! Deterministic text/audio embedding stand-ins and cosine similarity.
//!
//! Text embeds by hashing character n-grams (n = 1..=3, taken within
//! whitespace-separated words) into a fixed-dimension signed-count vector,
//! then L2-normalizing. Audio at desk scale is a frame matrix pooled by
//! mean and normalized the same way. Both encoders are pure functions and
//! bit-stable across platforms, so retrieval rankings are reproducible.

use crate::error::{Error, Result};
use crate::textmetrics::normalize;

pub const DEFAULT_DIM: usize = 256;

/// Compiled-in hash seed. Changing it changes every embedding, so it folds
/// into the encoder fingerprint.
const HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Seeded FNV-1a over raw bytes.
pub(crate) fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// A unit-norm embedding. Construction normalizes; the all-zero vector is
/// rejected rather than silently passed through.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn from_unnormalized(values: Vec<f32>) -> Result<Self> {
        let norm_sq: f64 = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        if !norm_sq.is_finite() {
            return Err(Error::NonFinite("embedding values"));
        }
        if norm_sq == 0.0 {
            return Err(Error::ZeroVector);
        }
        let norm = norm_sq.sqrt();
        let values = values
            .into_iter()
            .map(|v| (f64::from(v) / norm) as f32)
            .collect();
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Cosine similarity of two unit vectors: their dot product, clamped to
/// [-1, 1] against floating-point drift.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let dot: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// A timed stack of equal-dimension feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    frames: Vec<Vec<f32>>,
    frame_rate_hz: f64,
}

impl FrameMatrix {
    pub fn new(frames: Vec<Vec<f32>>, frame_rate_hz: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("frame list"));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::InvalidFrameRate(frame_rate_hz));
        }
        let dim = frames[0].len();
        for f in &frames {
            if f.len() != dim {
                return Err(Error::DimensionMismatch {
                    left: dim,
                    right: f.len(),
                });
            }
        }
        Ok(FrameMatrix {
            frames,
            frame_rate_hz,
        })
    }

    pub fn frames(&self) -> &[Vec<f32>] {
        &self.frames
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }
}

/// Keeps frames at indices 0, factor, 2*factor, ... and divides the frame
/// rate accordingly. At least frame 0 always survives.
pub fn subsample_frames(frames: &FrameMatrix, factor: usize) -> Result<FrameMatrix> {
    if factor == 0 {
        return Err(Error::ZeroFactor);
    }
    let kept: Vec<Vec<f32>> = frames.frames().iter().step_by(factor).cloned().collect();
    FrameMatrix::new(kept, frames.frame_rate_hz() / factor as f64)
}

/// Text encoders map a string to a unit embedding. Implementations must be
/// deterministic: the same input always yields the same vector.
pub trait TextEncoder: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
    fn dimension(&self) -> usize;
    /// Stable identifier of the encoder configuration; persisted indexes
    /// carry it to guard against querying with a mismatched encoder.
    fn fingerprint(&self) -> u64;
}

/// Audio encoders pool a frame matrix into a unit embedding.
pub trait AudioEncoder: Send + Sync {
    fn embed_audio(&self, frames: &FrameMatrix) -> Result<EmbeddingVector>;
    fn dimension(&self) -> usize;
}

/// Character n-gram hashing text encoder.
///
/// The normalized text is split on spaces and each word contributes its
/// character n-grams for n = 1..=3. Every n-gram hashes to one bucket with
/// a +-1 contribution whose sign comes from the hash's top bit, and the
/// accumulated vector is L2-normalized. Perturbed mentions ("tongyi abc")
/// therefore stay close to their base word, which is what the retrieval
/// layer relies on for fuzzy matching.
#[derive(Debug, Clone)]
pub struct NgramHashEncoder {
    dim: usize,
}

impl NgramHashEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyInput("embedding dimension"));
        }
        Ok(NgramHashEncoder { dim })
    }

    pub fn with_default_dim() -> Self {
        NgramHashEncoder { dim: DEFAULT_DIM }
    }
}

impl TextEncoder for NgramHashEncoder {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let norm = normalize(text);
        if norm.is_empty() {
            return Err(Error::EmptyText(text.to_string()));
        }
        let mut acc = vec![0.0f32; self.dim];
        let mut gram = String::with_capacity(16);
        for word in norm.split(' ') {
            let chars: Vec<char> = word.chars().collect();
            for n in 1..=chars.len().min(3) {
                for window in chars.windows(n) {
                    gram.clear();
                    gram.extend(window.iter());
                    let h = fnv1a64(HASH_SEED, gram.as_bytes());
                    let bucket = (h % self.dim as u64) as usize;
                    let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
                    acc[bucket] += sign;
                }
            }
        }
        EmbeddingVector::from_unnormalized(acc)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> u64 {
        fnv1a64(HASH_SEED, format!("ngram-hash-v1:{}", self.dim).as_bytes())
    }
}

/// Mean of the frames, L2-normalized.
pub fn mean_pool(frames: &[Vec<f32>]) -> Result<EmbeddingVector> {
    let Some(first) = frames.first() else {
        return Err(Error::EmptyInput("frame list"));
    };
    let dim = first.len();
    let mut acc = vec![0.0f64; dim];
    for frame in frames {
        if frame.len() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: frame.len(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(frame) {
            *a += f64::from(v);
        }
    }
    let n = frames.len() as f64;
    EmbeddingVector::from_unnormalized(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Pools frames by mean and normalizes; the desk-scale stand-in for an
/// audio encoder producing a fixed-dimensional embedding.
#[derive(Debug, Clone)]
pub struct MeanPoolAudioEncoder {
    dim: usize,
}

impl MeanPoolAudioEncoder {
    pub fn new(dim: usize) -> Self {
        MeanPoolAudioEncoder { dim }
    }
}

impl AudioEncoder for MeanPoolAudioEncoder {
    fn embed_audio(&self, frames: &FrameMatrix) -> Result<EmbeddingVector> {
        if frames.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: frames.dim(),
            });
        }
        mean_pool(frames.frames())
    }

    fn dimension(&self) -> usize {
        self.dim
    }
}

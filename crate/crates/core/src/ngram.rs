//! Hashed byte n-gram features and a logistic model over them.
//!
//! Every length-`n` byte window is hashed (FNV-1a, 64-bit) into one of
//! `num_buckets` presence features; a file either has a bucket or it does
//! not, and repeats do not count twice. The model is a logistic regression
//! over those buckets, trained with plain SGD. Scores are probabilities of
//! malice in the open interval (0, 1).

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::detect::{Detector, DetectorError};
use crate::seed::rng_from_seed;

pub const DEFAULT_N: u32 = 6;
pub const DEFAULT_NUM_BUCKETS: u64 = 1 << 20;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;

/// FNV-1a over a byte slice.
pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut h = FNV_OFFSET_BASIS;
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash every n-gram of `bytes` into bucket indices: sorted, deduplicated.
/// Files shorter than `n` have no features.
pub fn extract_features(bytes: &[u8], n: u32, num_buckets: u64) -> Vec<u64> {
    let n = n as usize;
    if n == 0 || bytes.len() < n || num_buckets == 0 {
        return Vec::new();
    }
    let mut feats: Vec<u64> = bytes.windows(n).map(|w| fnv1a64(w) % num_buckets).collect();
    feats.sort_unstable();
    feats.dedup();
    feats
}

/// A trained model: hashing parameters, weights, and the seed it was
/// trained under. Exactly what the on-disk format persists.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    pub n: u32,
    pub num_buckets: u64,
    pub bias: f64,
    pub weights: Vec<f64>,
    pub seed: u64,
}

fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-30.0, 30.0);
    1.0 / (1.0 + libm::exp(-z))
}

impl NGramModel {
    /// Score pre-extracted features.
    pub fn score_features(&self, features: &[u64]) -> f64 {
        let mut z = self.bias;
        for &f in features {
            z += self.weights[f as usize];
        }
        sigmoid(z)
    }

    /// Score a raw file.
    pub fn predict(&self, bytes: &[u8]) -> f64 {
        self.score_features(&extract_features(bytes, self.n, self.num_buckets))
    }
}

impl Detector for NGramModel {
    fn score(&self, bytes: &[u8]) -> Result<f64, DetectorError> {
        Ok(self.predict(bytes))
    }
}

/// One training example: extracted features plus its class.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: Vec<u64>,
    pub malicious: bool,
}

impl TrainSample {
    pub fn from_bytes(bytes: &[u8], malicious: bool, n: u32, num_buckets: u64) -> Self {
        TrainSample { features: extract_features(bytes, n, num_buckets), malicious }
    }
}

/// Training hyperparameters. The seed drives example shuffling only.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub n: u32,
    pub num_buckets: u64,
    pub epochs: u32,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n: DEFAULT_N,
            num_buckets: DEFAULT_NUM_BUCKETS,
            epochs: 10,
            learning_rate: 0.5,
            l2: 1e-6,
            seed: 0,
        }
    }
}

/// Training failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainError {
    /// A one-class corpus cannot define a decision boundary.
    DegenerateCorpus,
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::DegenerateCorpus => write!(f, "training corpus has only one class"),
        }
    }
}

/// Fit a logistic model with seeded SGD. Same samples, same config, same
/// model, regardless of platform.
pub fn train(samples: &[TrainSample], cfg: &TrainConfig) -> Result<NGramModel, TrainError> {
    let has_mal = samples.iter().any(|s| s.malicious);
    let has_ben = samples.iter().any(|s| !s.malicious);
    if !has_mal || !has_ben {
        return Err(TrainError::DegenerateCorpus);
    }
    let mut weights = vec![0.0f64; cfg.num_buckets as usize];
    let mut bias = 0.0f64;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = rng_from_seed(cfg.seed);
    let lr = cfg.learning_rate;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let s = &samples[i];
            let mut z = bias;
            for &f in &s.features {
                z += weights[f as usize];
            }
            let p = sigmoid(z);
            let y = if s.malicious { 1.0 } else { 0.0 };
            let g = p - y;
            let decay = 1.0 - lr * cfg.l2;
            for &f in &s.features {
                let w = &mut weights[f as usize];
                *w = *w * decay - lr * g;
            }
            bias -= lr * g;
        }
    }
    Ok(NGramModel { n: cfg.n, num_buckets: cfg.num_buckets, bias, weights, seed: cfg.seed })
}

pub const MODEL_MAGIC: &[u8; 6] = b"SUBNG1";
pub const MODEL_VERSION: u32 = 1;

/// Model (de)serialization failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelCodecError {
    BadMagic,
    VersionMismatch { found: u32 },
    /// Truncated, oversized, or internally inconsistent payload.
    Corrupt,
}

impl core::fmt::Display for ModelCodecError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelCodecError::BadMagic => write!(f, "not a model file (bad magic)"),
            ModelCodecError::VersionMismatch { found } => {
                write!(f, "model format version {found} not supported (expected {MODEL_VERSION})")
            }
            ModelCodecError::Corrupt => write!(f, "model file corrupt"),
        }
    }
}

/// Serialize a model: magic, then little-endian version, n, bucket count,
/// bias, weights, training seed.
pub fn encode_model(model: &NGramModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 + 4 + 8 + 8 + model.weights.len() * 8 + 8);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&model.n.to_le_bytes());
    out.extend_from_slice(&model.num_buckets.to_le_bytes());
    out.extend_from_slice(&model.bias.to_le_bytes());
    for w in &model.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&model.seed.to_le_bytes());
    out
}

fn take<const N: usize>(bytes: &[u8], at: usize) -> Result<[u8; N], ModelCodecError> {
    bytes
        .get(at..at + N)
        .and_then(|s| s.try_into().ok())
        .ok_or(ModelCodecError::Corrupt)
}

/// Parse a model file. The header's bucket count must account for the
/// payload length exactly; nothing is allocated before that checks out.
pub fn decode_model(bytes: &[u8]) -> Result<NGramModel, ModelCodecError> {
    if bytes.len() < 6 || &bytes[..6] != MODEL_MAGIC {
        return Err(ModelCodecError::BadMagic);
    }
    let version = u32::from_le_bytes(take::<4>(bytes, 6)?);
    if version != MODEL_VERSION {
        return Err(ModelCodecError::VersionMismatch { found: version });
    }
    let n = u32::from_le_bytes(take::<4>(bytes, 10)?);
    let num_buckets = u64::from_le_bytes(take::<8>(bytes, 14)?);
    let expected = (num_buckets as u128)
        .checked_mul(8)
        .and_then(|w| w.checked_add(6 + 4 + 4 + 8 + 8 + 8))
        .ok_or(ModelCodecError::Corrupt)?;
    if bytes.len() as u128 != expected {
        return Err(ModelCodecError::Corrupt);
    }
    let bias = f64::from_le_bytes(take::<8>(bytes, 22)?);
    let mut weights = Vec::with_capacity(num_buckets as usize);
    let mut at = 30usize;
    for _ in 0..num_buckets {
        weights.push(f64::from_le_bytes(take::<8>(bytes, at)?));
        at += 8;
    }
    let seed = u64::from_le_bytes(take::<8>(bytes, at)?);
    Ok(NGramModel { n, num_buckets, bias, weights, seed })
}

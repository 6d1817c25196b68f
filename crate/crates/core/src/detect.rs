//! The detector contract: anything that maps raw bytes to a malice score.
//!
//! Detectors are opaque scoring oracles. The harness never sees inside one;
//! it only observes `score(bytes) -> [0, 1]` and thresholds the result.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

/// Thresholded verdict for one file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Decision {
    Malicious,
    Benign,
}

/// One scan: the raw score, the verdict, and how long the engine took.
/// Engines that cannot measure time report a zero latency and the caller
/// measures around the scan instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanResult {
    pub score: f64,
    pub decision: Decision,
    pub latency: Duration,
}

/// Failure while obtaining a score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectorError {
    /// An external engine took longer than its configured budget.
    AdapterTimeout,
    /// An external engine replied with something outside its protocol,
    /// including scores outside `[0, 1]`.
    AdapterProtocolError(String),
    /// An external engine exited or closed its pipes mid-conversation.
    AdapterCrashed(String),
    /// The engine ran but could not score this input.
    ScanFailed(String),
}

impl core::fmt::Display for DetectorError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DetectorError::AdapterTimeout => write!(f, "adapter timed out"),
            DetectorError::AdapterProtocolError(m) => write!(f, "adapter protocol error: {m}"),
            DetectorError::AdapterCrashed(m) => write!(f, "adapter crashed: {m}"),
            DetectorError::ScanFailed(m) => write!(f, "scan failed: {m}"),
        }
    }
}

/// A scoring engine. Implementations must be callable from multiple threads;
/// engines that serialize access internally (e.g. one subprocess) still
/// satisfy the contract by blocking.
pub trait Detector: Send + Sync {
    fn score(&self, bytes: &[u8]) -> Result<f64, DetectorError>;
}

impl<F> Detector for F
where
    F: Fn(&[u8]) -> f64 + Send + Sync,
{
    fn score(&self, bytes: &[u8]) -> Result<f64, DetectorError> {
        Ok(self(bytes))
    }
}

/// A named engine plus the threshold that turns its scores into verdicts.
pub struct DetectorHandle {
    pub id: String,
    pub threshold: f64,
    /// Whether concurrent scans are allowed. Subprocess-backed engines that
    /// own a single child process set this false and the harness serializes.
    pub reentrant: bool,
    engine: Box<dyn Detector>,
}

impl DetectorHandle {
    /// Wrap an engine with the default 0.5 threshold.
    pub fn new(id: impl Into<String>, engine: Box<dyn Detector>) -> Self {
        DetectorHandle { id: id.into(), threshold: 0.5, reentrant: true, engine }
    }

    /// Override the decision threshold. Scores at or above it are malicious.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        assert!(
            (0.0..=1.0).contains(&threshold),
            "threshold must lie in [0, 1], got {threshold}"
        );
        self.threshold = threshold;
        self
    }

    pub fn non_reentrant(mut self) -> Self {
        self.reentrant = false;
        self
    }

    pub fn decide(&self, score: f64) -> Decision {
        if score >= self.threshold {
            Decision::Malicious
        } else {
            Decision::Benign
        }
    }

    /// Score one buffer and threshold the result. Scores outside `[0, 1]`
    /// are rejected here so no engine can smuggle one past the protocol.
    pub fn scan(&self, bytes: &[u8]) -> Result<ScanResult, DetectorError> {
        let score = self.engine.score(bytes)?;
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(DetectorError::AdapterProtocolError(format!(
                "score {score} outside [0, 1]"
            )));
        }
        Ok(ScanResult { score, decision: self.decide(score), latency: Duration::ZERO })
    }
}

impl core::fmt::Debug for DetectorHandle {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("DetectorHandle")
            .field("id", &self.id)
            .field("threshold", &self.threshold)
            .field("reentrant", &self.reentrant)
            .finish_non_exhaustive()
    }
}

/// Toy engine for experiments and tests: flags any file containing a fixed
/// byte pattern.
pub struct SignatureEngine {
    pattern: Vec<u8>,
}

impl SignatureEngine {
    pub fn new(pattern: Vec<u8>) -> Self {
        assert!(!pattern.is_empty(), "empty signature matches everything");
        SignatureEngine { pattern }
    }
}

impl Detector for SignatureEngine {
    fn score(&self, bytes: &[u8]) -> Result<f64, DetectorError> {
        let hit = bytes.windows(self.pattern.len()).any(|w| w == self.pattern);
        Ok(if hit { 1.0 } else { 0.0 })
    }
}

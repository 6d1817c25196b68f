//! Occlusion: overwrite byte regions and watch the score move.
//!
//! The search localizes what a detector keys on: occlude each half of the
//! current window, keep the half whose occlusion hurts the malicious score
//! more, and recurse until the window is no bigger than `beta`. Each level
//! costs exactly two detector calls, so a whole search is 2·⌈log2(|F|/beta)⌉
//! calls. The same machinery, pointed at a random window with no detector
//! in the loop, is the undirected control.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::{Decision, DetectorError, DetectorHandle, ScanResult};
use crate::seed::rng_from_seed;

/// Pool of benign files used as occlusion material.
#[derive(Debug, Clone)]
pub struct BenignPool {
    files: Vec<Vec<u8>>,
}

impl BenignPool {
    /// Build a pool from candidate files; empty files are dropped, and a
    /// pool with nothing left is refused.
    pub fn new(files: Vec<Vec<u8>>) -> Option<Self> {
        let files: Vec<Vec<u8>> = files.into_iter().filter(|f| !f.is_empty()).collect();
        if files.is_empty() {
            None
        } else {
            Some(BenignPool { files })
        }
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

/// Where replacement bytes come from.
#[derive(Debug, Clone)]
pub enum ByteSource {
    /// Uniform random bytes.
    RandomUniform { seed: u64 },
    /// A contiguous slice of one benign file when any is long enough;
    /// otherwise random slices concatenated (flagged on the draw).
    BenignSample { pool: BenignPool, seed: u64 },
    /// Zeros.
    ZeroFill,
}

impl ByteSource {
    /// Fill `dst` with replacement bytes. Fully determined by the source
    /// variant, its seed, `dst.len()`, and `draw_index`. Returns whether a
    /// benign draw had to fall back to concatenation.
    pub fn fill(&self, dst: &mut [u8], draw_index: u64) -> bool {
        match self {
            ByteSource::ZeroFill => {
                dst.fill(0);
                false
            }
            ByteSource::RandomUniform { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(draw_index);
                rng.fill_bytes(dst);
                false
            }
            ByteSource::BenignSample { pool, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(draw_index);
                if dst.is_empty() {
                    return false;
                }
                let eligible: Vec<&Vec<u8>> =
                    pool.files.iter().filter(|f| f.len() >= dst.len()).collect();
                if !eligible.is_empty() {
                    let f = eligible[rng.gen_range(0..eligible.len())];
                    let at = rng.gen_range(0..=f.len() - dst.len());
                    dst.copy_from_slice(&f[at..at + dst.len()]);
                    return false;
                }
                let mut cursor = 0usize;
                while cursor < dst.len() {
                    let f = &pool.files[rng.gen_range(0..pool.files.len())];
                    let at = rng.gen_range(0..f.len());
                    let chunk = (f.len() - at).min(dst.len() - cursor);
                    dst[cursor..cursor + chunk].copy_from_slice(&f[at..at + chunk]);
                    cursor += chunk;
                }
                true
            }
        }
    }

    /// Allocate and fill a buffer of `len` replacement bytes.
    pub fn draw(&self, len: usize, draw_index: u64) -> (Vec<u8>, bool) {
        let mut buf = vec![0u8; len];
        let concatenated = self.fill(&mut buf, draw_index);
        (buf, concatenated)
    }
}

/// On a score tie between halves, which one survives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    Left,
    Right,
}

/// Search parameters: stop once the window is `beta` bytes or fewer.
#[derive(Debug, Clone)]
pub struct OcclusionConfig {
    pub beta: usize,
    pub tie_break: TieBreak,
    pub source: ByteSource,
}

impl OcclusionConfig {
    pub fn new(source: ByteSource) -> Self {
        OcclusionConfig { beta: 2048, tie_break: TieBreak::Left, source }
    }
}

/// One bisection level: the window it examined and both halves' scores.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LevelTrace {
    pub start: usize,
    pub end: usize,
    pub mid: usize,
    pub left_score: f64,
    pub right_score: f64,
    pub kept_left: bool,
}

/// Result of a completed search.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct OcclusionOutcome {
    /// Final window, `start..end`.
    pub start: usize,
    pub end: usize,
    pub baseline_score: f64,
    /// Detector calls issued by the search: two per level.
    pub calls: u32,
    pub trace: Vec<LevelTrace>,
    /// Whether any benign-material draw fell back to concatenation.
    pub concat_fallback: bool,
}

/// Occlusion failure.
#[derive(Debug)]
pub enum OcclusionError {
    /// `start..end` is empty or exceeds the file.
    RangeOutOfBounds,
    /// The file is not larger than the window floor, so there is nothing
    /// to search (or to place an undirected window in).
    FileTooSmall,
    /// `beta` of zero cannot terminate.
    InvalidBeta,
    /// A targeted attack was asked to evade a detector that already calls
    /// the file benign.
    BaselineNotMalicious,
    /// The detector failed mid-search; the trace covers completed levels.
    DetectorFailure {
        error: DetectorError,
        trace: Vec<LevelTrace>,
        /// Calls issued, including the failing one.
        calls: u32,
    },
}

impl core::fmt::Display for OcclusionError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            OcclusionError::RangeOutOfBounds => write!(f, "occlusion range out of bounds"),
            OcclusionError::FileTooSmall => write!(f, "file too small for the window size"),
            OcclusionError::InvalidBeta => write!(f, "beta must be at least 1"),
            OcclusionError::BaselineNotMalicious => {
                write!(f, "baseline decision is already benign")
            }
            OcclusionError::DetectorFailure { error, calls, .. } => {
                write!(f, "detector failed after {calls} calls: {error}")
            }
        }
    }
}

/// Replace `bytes[start..end]` with source material.
pub fn occlude_region(
    bytes: &[u8],
    start: usize,
    end: usize,
    source: &ByteSource,
    draw_index: u64,
) -> Result<Vec<u8>, OcclusionError> {
    if start >= end || end > bytes.len() {
        return Err(OcclusionError::RangeOutOfBounds);
    }
    let mut out = bytes.to_vec();
    source.fill(&mut out[start..end], draw_index);
    Ok(out)
}

/// Bisect the whole file down to the window the detector cares about most.
///
/// `baseline_score` is the caller's score for the unmodified file; the
/// search itself spends exactly two detector calls per level. Windows split
/// with the left half taking the extra byte; the half whose occlusion
/// produces the lower malicious score is kept (ties fall to the configured
/// side). The returned window is at most `beta` bytes and at least
/// ⌈`beta`/2⌉ once at least one level has run.
pub fn occlusion_search(
    bytes: &[u8],
    detector: &DetectorHandle,
    cfg: &OcclusionConfig,
    baseline_score: f64,
) -> Result<OcclusionOutcome, OcclusionError> {
    if cfg.beta == 0 {
        return Err(OcclusionError::InvalidBeta);
    }
    if bytes.len() <= cfg.beta {
        return Err(OcclusionError::FileTooSmall);
    }
    let mut buf = bytes.to_vec();
    let mut start = 0usize;
    let mut end = bytes.len();
    let mut draw_index = 0u64;
    let mut calls = 0u32;
    let mut trace: Vec<LevelTrace> = Vec::new();
    let mut concat_fallback = false;

    let probe = |buf: &mut Vec<u8>,
                     lo: usize,
                     hi: usize,
                     draw_index: u64,
                     calls: &mut u32,
                     concat: &mut bool,
                     trace: &Vec<LevelTrace>|
     -> Result<f64, OcclusionError> {
        *concat |= cfg.source.fill(&mut buf[lo..hi], draw_index);
        *calls += 1;
        let scored = detector.scan(buf);
        buf[lo..hi].copy_from_slice(&bytes[lo..hi]);
        match scored {
            Ok(r) => Ok(r.score),
            Err(error) => Err(OcclusionError::DetectorFailure {
                error,
                trace: trace.clone(),
                calls: *calls,
            }),
        }
    };

    while end - start > cfg.beta {
        let mid = start + (end - start + 1) / 2;
        let left_score =
            probe(&mut buf, start, mid, draw_index, &mut calls, &mut concat_fallback, &trace)?;
        draw_index += 1;
        let right_score =
            probe(&mut buf, mid, end, draw_index, &mut calls, &mut concat_fallback, &trace)?;
        draw_index += 1;

        let kept_left = match left_score.partial_cmp(&right_score) {
            Some(core::cmp::Ordering::Less) => true,
            Some(core::cmp::Ordering::Greater) => false,
            _ => cfg.tie_break == TieBreak::Left,
        };
        trace.push(LevelTrace { start, end, mid, left_score, right_score, kept_left });
        if kept_left {
            end = mid;
        } else {
            start = mid;
        }
    }

    Ok(OcclusionOutcome { start, end, baseline_score, calls, trace, concat_fallback })
}

/// A targeted attack: search, then occlude the located window for real.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub bytes: Vec<u8>,
    pub baseline: ScanResult,
    pub search: OcclusionOutcome,
    pub post: ScanResult,
    /// True iff the occluded file comes back benign.
    pub evaded: bool,
}

/// Run the search against a file the detector currently flags, then occlude
/// the final window and rescore. Refuses files already scored benign.
pub fn targeted_occlusion_attack(
    bytes: &[u8],
    detector: &DetectorHandle,
    cfg: &OcclusionConfig,
) -> Result<AttackOutcome, OcclusionError> {
    let baseline = detector.scan(bytes).map_err(|error| OcclusionError::DetectorFailure {
        error,
        trace: Vec::new(),
        calls: 1,
    })?;
    if baseline.decision != Decision::Malicious {
        return Err(OcclusionError::BaselineNotMalicious);
    }
    let search = occlusion_search(bytes, detector, cfg, baseline.score)?;
    let mut out = bytes.to_vec();
    cfg.source.fill(&mut out[search.start..search.end], search.calls as u64);
    let post = detector.scan(&out).map_err(|error| OcclusionError::DetectorFailure {
        error,
        trace: search.trace.clone(),
        calls: search.calls + 2,
    })?;
    let evaded = post.decision == Decision::Benign;
    Ok(AttackOutcome { bytes: out, baseline, search, post, evaded })
}

/// The control arm: overwrite one uniformly placed `beta`-byte window with
/// random bytes. No detector in the loop.
pub fn undirected_occlusion(
    bytes: &[u8],
    beta: usize,
    seed: u64,
) -> Result<(Vec<u8>, (usize, usize)), OcclusionError> {
    if beta == 0 {
        return Err(OcclusionError::InvalidBeta);
    }
    if bytes.len() < beta {
        return Err(OcclusionError::FileTooSmall);
    }
    let mut rng = rng_from_seed(seed);
    let start = rng.gen_range(0..=bytes.len() - beta);
    let mut out = bytes.to_vec();
    rng.fill_bytes(&mut out[start..start + beta]);
    Ok((out, (start, start + beta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::boxed::Box;

    fn zero_cfg(beta: usize) -> OcclusionConfig {
        OcclusionConfig { beta, tie_break: TieBreak::Left, source: ByteSource::ZeroFill }
    }

    /// Flags files whose byte at `at` still holds `value`.
    fn byte_probe(at: usize, value: u8) -> DetectorHandle {
        DetectorHandle::new(
            "byte-probe",
            Box::new(move |b: &[u8]| if b.get(at) == Some(&value) { 1.0 } else { 0.0 }),
        )
    }

    #[test]
    fn sixteen_byte_walkthrough_localizes_the_hot_byte() {
        let mut file = [0x11u8; 16];
        file[11] = 0xAA;
        let det = byte_probe(11, 0xAA);
        let out = occlusion_search(&file, &det, &zero_cfg(2), 1.0).unwrap();
        assert_eq!((out.start, out.end), (10, 12));
        assert_eq!(out.calls, 6);
        assert_eq!(out.trace.len(), 3);
        let kept: Vec<bool> = out.trace.iter().map(|t| t.kept_left).collect();
        assert_eq!(kept, [false, true, false]);
    }

    #[test]
    fn call_count_and_window_law_on_power_of_two_files() {
        for (size_log, beta_log) in [(12u32, 8u32), (14, 11), (16, 11), (10, 1)] {
            let size = 1usize << size_log;
            let beta = 1usize << beta_log;
            let mut file = vec![0x33u8; size];
            let hot = size / 3;
            file[hot] = 0xAA;
            let det = byte_probe(hot, 0xAA);
            let out = occlusion_search(&file, &det, &zero_cfg(beta), 1.0).unwrap();
            assert_eq!(out.end - out.start, beta, "window must land exactly on beta");
            assert_eq!(out.calls, 2 * (size_log - beta_log), "two calls per level");
            assert!(out.start <= hot && hot < out.end, "window must keep the hot byte");
        }
    }

    #[test]
    fn window_stays_within_the_beta_bracket_on_ragged_sizes() {
        for (size, beta) in [(1000usize, 7usize), (999, 16), (12345, 100), (50, 3)] {
            let mut file = vec![0x44u8; size];
            file[size / 2] = 0xAA;
            let det = byte_probe(size / 2, 0xAA);
            let out = occlusion_search(&file, &det, &zero_cfg(beta), 1.0).unwrap();
            let len = out.end - out.start;
            assert!(len <= beta, "{size}/{beta}: window {len} exceeds beta");
            assert!(len >= beta.div_ceil(2), "{size}/{beta}: window {len} below half-beta floor");
        }
    }

    #[test]
    fn ties_fall_to_the_configured_side() {
        let flat = DetectorHandle::new("flat", Box::new(|_: &[u8]| 0.7f64));
        let file = [0u8; 16];
        let left = occlusion_search(&file, &flat, &zero_cfg(2), 0.7).unwrap();
        assert_eq!((left.start, left.end), (0, 2));
        let cfg = OcclusionConfig { tie_break: TieBreak::Right, ..zero_cfg(2) };
        let right = occlusion_search(&file, &flat, &cfg, 0.7).unwrap();
        assert_eq!((right.start, right.end), (14, 16));
    }

    #[test]
    fn small_files_and_zero_beta_are_refused() {
        let det = byte_probe(0, 0);
        assert!(matches!(
            occlusion_search(&[0u8; 16], &det, &zero_cfg(16), 1.0),
            Err(OcclusionError::FileTooSmall)
        ));
        assert!(matches!(
            occlusion_search(&[0u8; 16], &det, &zero_cfg(0), 1.0),
            Err(OcclusionError::InvalidBeta)
        ));
    }

    #[test]
    fn detector_failure_carries_the_partial_trace() {
        use core::sync::atomic::{AtomicU32, Ordering};
        static CALLS: AtomicU32 = AtomicU32::new(0);
        CALLS.store(0, Ordering::SeqCst);
        struct Flaky;
        impl crate::detect::Detector for Flaky {
            fn score(&self, _: &[u8]) -> Result<f64, DetectorError> {
                let n = CALLS.fetch_add(1, Ordering::SeqCst);
                if n >= 2 {
                    Err(DetectorError::ScanFailed("gave up".into()))
                } else {
                    Ok(0.9)
                }
            }
        }
        let det = DetectorHandle::new("flaky", Box::new(Flaky));
        let err = occlusion_search(&[0u8; 64], &det, &zero_cfg(4), 0.9).unwrap_err();
        match err {
            OcclusionError::DetectorFailure { trace, calls, .. } => {
                assert_eq!(trace.len(), 1, "one completed level before the failure");
                assert_eq!(calls, 3);
            }
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn draws_are_reproducible_and_indexed() {
        let src = ByteSource::RandomUniform { seed: 5 };
        let (a, _) = src.draw(64, 0);
        let (b, _) = src.draw(64, 0);
        let (c, _) = src.draw(64, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, vec![0u8; 64]);

        let pool = BenignPool::new(vec![vec![7u8; 128]]).unwrap();
        let src = ByteSource::BenignSample { pool, seed: 5 };
        let (a, concat) = src.draw(64, 3);
        assert!(!concat);
        assert_eq!(a, vec![7u8; 64]);
    }

    #[test]
    fn short_pools_concatenate_and_flag_it() {
        let pool = BenignPool::new(vec![vec![1u8; 8], vec![2u8; 8]]).unwrap();
        let src = ByteSource::BenignSample { pool, seed: 9 };
        let (buf, concat) = src.draw(64, 0);
        assert!(concat);
        assert_eq!(buf.len(), 64);
        assert!(buf.iter().all(|&b| b == 1 || b == 2));

        let file = {
            let mut f = vec![0u8; 256];
            f[100] = 0xAA;
            f
        };
        let det = byte_probe(100, 0xAA);
        let pool = BenignPool::new(vec![vec![1u8; 4]]).unwrap();
        let cfg = OcclusionConfig {
            beta: 16,
            tie_break: TieBreak::Left,
            source: ByteSource::BenignSample { pool, seed: 1 },
        };
        let out = occlusion_search(&file, &det, &cfg, 1.0).unwrap();
        assert!(out.concat_fallback);
    }

    #[test]
    fn occlude_region_respects_bounds() {
        let bytes = [9u8; 32];
        let out = occlude_region(&bytes, 4, 12, &ByteSource::ZeroFill, 0).unwrap();
        assert_eq!(&out[4..12], &[0u8; 8]);
        assert_eq!(&out[..4], &[9u8; 4]);
        assert_eq!(&out[12..], &[9u8; 20]);
        assert!(matches!(
            occlude_region(&bytes, 12, 12, &ByteSource::ZeroFill, 0),
            Err(OcclusionError::RangeOutOfBounds)
        ));
        assert!(matches!(
            occlude_region(&bytes, 4, 33, &ByteSource::ZeroFill, 0),
            Err(OcclusionError::RangeOutOfBounds)
        ));
    }

    #[test]
    fn targeted_attack_destroys_a_planted_signature() {
        let mut file = vec![0x20u8; 4096];
        for (i, b) in file.iter_mut().enumerate() {
            *b = (i % 251) as u8;
        }
        let sig_at = 1234;
        file[sig_at..sig_at + 8].copy_from_slice(&[0xDE; 8]);
        let det = DetectorHandle::new(
            "sig",
            Box::new(crate::detect::SignatureEngine::new(vec![0xDE; 8])),
        );
        let out = targeted_occlusion_attack(&file, &det, &zero_cfg(16)).unwrap();
        assert!(out.evaded, "zeroing the located window must kill the signature");
        assert_eq!(out.post.decision, Decision::Benign);
        assert_eq!(out.baseline.decision, Decision::Malicious);
        assert_ne!(out.bytes, file);
        assert_eq!(out.bytes.len(), file.len());
    }

    #[test]
    fn targeted_attack_refuses_benign_baselines() {
        let det = DetectorHandle::new("never", Box::new(|_: &[u8]| 0.0f64));
        assert!(matches!(
            targeted_occlusion_attack(&[0u8; 64], &det, &zero_cfg(4)),
            Err(OcclusionError::BaselineNotMalicious)
        ));
    }

    #[test]
    fn undirected_occlusion_is_seeded_and_windowed() {
        let file = vec![0xEEu8; 512];
        let (a, win_a) = undirected_occlusion(&file, 64, 3).unwrap();
        let (b, win_b) = undirected_occlusion(&file, 64, 3).unwrap();
        let (c, _) = undirected_occlusion(&file, 64, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(win_a, win_b);
        assert_ne!(a, c);
        assert_eq!(win_a.1 - win_a.0, 64);
        let changed: Vec<usize> =
            (0..file.len()).filter(|&i| a[i] != file[i]).collect();
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|&i| i >= win_a.0 && i < win_a.1));
        assert!(matches!(
            undirected_occlusion(&[0u8; 8], 16, 0),
            Err(OcclusionError::FileTooSmall)
        ));
    }
}

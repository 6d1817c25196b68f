//! Confusion-matrix accounting, accuracy, and detection-lift arithmetic.
//!
//! Malware is the positive class everywhere: a true positive is a malicious
//! file the detector flagged, a false positive is a benign file it flagged.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::detect::Decision;
use crate::pe::Label;

/// Raw confusion counts for one detector over one evaluation set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    /// Tally one labelled decision. `Unknown`-labelled files are the
    /// caller's problem; this only accepts definite labels.
    pub fn record(&mut self, label: Label, decision: Decision) {
        match (label, decision) {
            (Label::Malicious, Decision::Malicious) => self.true_pos += 1,
            (Label::Malicious, Decision::Benign) => self.false_neg += 1,
            (Label::Benign, Decision::Malicious) => self.false_pos += 1,
            (Label::Benign, Decision::Benign) => self.true_neg += 1,
            (Label::Unknown, _) => {}
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }
}

/// Percentages derived from a confusion matrix.
///
/// Rate denominators are per class: `tp_pct` and `fn_pct` are fractions of
/// the malicious files, `tn_pct` and `fp_pct` fractions of the benign files.
/// `accuracy_pct` is over all files.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub tp_pct: f64,
    pub tn_pct: f64,
    pub fp_pct: f64,
    pub fn_pct: f64,
    pub accuracy_pct: f64,
}

/// Error from metric computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsError {
    /// One of the classes is empty, so its rates are undefined.
    ZeroClass,
}

impl core::fmt::Display for MetricsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MetricsError::ZeroClass => write!(f, "a class has zero members; rates undefined"),
        }
    }
}

/// Turn counts into per-class percentages and overall accuracy.
pub fn compute_metrics(
    counts: &ConfusionCounts,
    n_malicious: u64,
    n_benign: u64,
) -> Result<Metrics, MetricsError> {
    if n_malicious == 0 || n_benign == 0 {
        return Err(MetricsError::ZeroClass);
    }
    let nm = n_malicious as f64;
    let nb = n_benign as f64;
    let total = nm + nb;
    Ok(Metrics {
        tp_pct: 100.0 * counts.true_pos as f64 / nm,
        fn_pct: 100.0 * counts.false_neg as f64 / nm,
        tn_pct: 100.0 * counts.true_neg as f64 / nb,
        fp_pct: 100.0 * counts.false_pos as f64 / nb,
        accuracy_pct: 100.0 * (counts.true_pos + counts.true_neg) as f64 / total,
    })
}

/// Detection lift of a transformation relative to its false-positive cost.
///
/// `pre_benign_accuracy_pct` is the detection rate on the untransformed
/// benign set; `post_detect_pct` is the rate at which transformed benign
/// files are flagged. Positive lift means the transformation itself draws
/// more detections than the baseline false-positive rate explains.
pub fn compute_lift(pre_benign_accuracy_pct: f64, post_detect_pct: f64) -> f64 {
    post_detect_pct - (100.0 - pre_benign_accuracy_pct)
}

/// Cumulative evasion counts for one detector across a mutation campaign.
///
/// `evaded_by[k]` counts files that reached a benign verdict within the
/// first `k` mutation steps, so the series is monotone non-decreasing and
/// `already_fn + evaded_by[max] + survived` equals the file total.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EvasionCurve {
    pub detector_id: String,
    pub already_fn: u64,
    pub evaded_by: Vec<u64>,
    pub survived: u64,
}

impl EvasionCurve {
    pub fn new(detector_id: String, max_steps: u32) -> Self {
        EvasionCurve {
            detector_id,
            already_fn: 0,
            evaded_by: vec![0; max_steps as usize + 1],
            survived: 0,
        }
    }

    /// Record one file's outcome: `None` for a chain that never evaded,
    /// `Some(k)` for first evasion at step `k` (1-based).
    pub fn record_chain(&mut self, evaded_at: Option<u32>) {
        match evaded_at {
            Some(k) => {
                for slot in self.evaded_by.iter_mut().skip(k as usize) {
                    *slot += 1;
                }
            }
            None => self.survived += 1,
        }
    }

    pub fn record_already_fn(&mut self) {
        self.already_fn += 1;
    }

    pub fn total(&self) -> u64 {
        self.already_fn + self.evaded_by.last().copied().unwrap_or(0) + self.survived
    }
}

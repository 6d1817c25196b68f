//! Report emission: `report.json`, `report.md`, and `curves.csv`, all
//! derived from experiment outcomes and reproducible byte for byte from
//! the same corpus, seed, and config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gauntlet_core::metrics::{ConfusionCounts, Metrics};
use sha2::{Digest, Sha256};

use crate::engine::{
    BaselineOutcome, EngineError, EvadeOutcome, MutatorOutcome, OcclusionResults, PackingOutcome,
};

#[derive(Debug, Clone, serde::Serialize)]
pub struct BaselineSection {
    pub counts: ConfusionCounts,
    pub n_malicious: u64,
    pub n_benign: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    pub scan_failures: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ChainCurveSection {
    pub already_fn: u64,
    pub survived: u64,
    pub chain_errors: u64,
    /// Cumulative files evading within k steps, index 0..=max_steps.
    pub evaded_by: Vec<u64>,
    pub total: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ChainsSection {
    pub max_steps: u32,
    pub per_detector: BTreeMap<String, ChainCurveSection>,
}

/// Everything a run publishes. Latency and wall-clock time live only in
/// the ledger so the same inputs always serialize to the same report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvaluationReport {
    pub run_id: String,
    pub artifact_version: String,
    pub model_format_version: u32,
    pub seed: u64,
    pub corpus_digest: String,
    pub corpus_files: u64,
    pub baseline: BTreeMap<String, BaselineSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chains: Option<ChainsSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<OcclusionResults>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub packing: Option<PackingOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external_mutator: Option<MutatorOutcome>,
}

impl EvaluationReport {
    pub fn new(seed: u64, corpus_digest: &str, corpus_files: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"evaluation.run");
        h.update(corpus_digest.as_bytes());
        h.update(seed.to_le_bytes());
        let run_id = hex::encode(&h.finalize()[..8]);
        EvaluationReport {
            run_id,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            model_format_version: crate::MODEL_FORMAT_VERSION,
            seed,
            corpus_digest: corpus_digest.to_string(),
            corpus_files,
            baseline: BTreeMap::new(),
            chains: None,
            occlusion: None,
            packing: None,
            external_mutator: None,
        }
    }

    pub fn set_baseline(&mut self, outcomes: &[BaselineOutcome]) {
        for o in outcomes {
            self.baseline.insert(
                o.detector.clone(),
                BaselineSection {
                    counts: o.counts,
                    n_malicious: o.n_malicious,
                    n_benign: o.n_benign,
                    metrics: o.metrics().ok(),
                    scan_failures: o.failures.len() as u64,
                },
            );
        }
    }

    pub fn set_chains(&mut self, max_steps: u32, outcomes: &[EvadeOutcome]) {
        let per_detector = outcomes
            .iter()
            .map(|o| {
                (
                    o.detector.clone(),
                    ChainCurveSection {
                        already_fn: o.curve.already_fn,
                        survived: o.curve.survived,
                        chain_errors: o.errors.len() as u64,
                        evaded_by: o.curve.evaded_by.clone(),
                        total: o.curve.total(),
                    },
                )
            })
            .collect();
        self.chains = Some(ChainsSection { max_steps, per_detector });
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Write `report.json`, `report.md`, and (when chains ran) `curves.csv`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, EngineError> {
        fs::create_dir_all(dir)
            .map_err(|source| EngineError::Io { path: dir.to_path_buf(), source })?;
        let mut written = Vec::new();
        let json_path = dir.join("report.json");
        fs::write(&json_path, self.to_json())
            .map_err(|source| EngineError::Io { path: json_path.clone(), source })?;
        written.push(json_path);
        let md_path = dir.join("report.md");
        fs::write(&md_path, self.to_markdown())
            .map_err(|source| EngineError::Io { path: md_path.clone(), source })?;
        written.push(md_path);
        if self.chains.is_some() {
            let csv_path = dir.join("curves.csv");
            fs::write(&csv_path, self.curves_csv())
                .map_err(|source| EngineError::Io { path: csv_path.clone(), source })?;
            written.push(csv_path);
        }
        Ok(written)
    }

    /// One row per (detector, step budget): cumulative evasions within k steps.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("detector,k,evaded_by\n");
        if let Some(chains) = &self.chains {
            for (det, curve) in &chains.per_detector {
                for (k, n) in curve.evaded_by.iter().enumerate() {
                    let _ = writeln!(out, "{det},{k},{n}");
                }
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Evaluation report `{}`", self.run_id);
        let _ = writeln!(md);
        let _ = writeln!(md, "- artifact: v{}", self.artifact_version);
        let _ = writeln!(md, "- model format: v{}", self.model_format_version);
        let _ = writeln!(md, "- seed: {}", self.seed);
        let _ = writeln!(md, "- corpus: {} files, digest `{}`", self.corpus_files, self.corpus_digest);
        let _ = writeln!(md);

        let _ = writeln!(md, "## Baseline accuracy");
        let _ = writeln!(md);
        let _ = writeln!(md, "| Detector | TN% | TP% | FN% | FP% | Accuracy% | Errors |");
        let _ = writeln!(md, "|---|---|---|---|---|---|---|");
        for (det, b) in &self.baseline {
            match &b.metrics {
                Some(m) => {
                    let _ = writeln!(
                        md,
                        "| {det} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {} |",
                        m.tn_pct, m.tp_pct, m.fn_pct, m.fp_pct, m.accuracy_pct, b.scan_failures
                    );
                }
                None => {
                    let _ = writeln!(
                        md,
                        "| {det} | - | - | - | - | - | {} |",
                        b.scan_failures
                    );
                }
            }
        }
        let _ = writeln!(md);

        if let Some(chains) = &self.chains {
            let _ = writeln!(md, "## Modification chains (max {} steps)", chains.max_steps);
            let _ = writeln!(md);
            let _ = writeln!(
                md,
                "| Detector | Already FN | Evaded ≤{} steps | Survived | Errors | Total |",
                chains.max_steps
            );
            let _ = writeln!(md, "|---|---|---|---|---|---|");
            for (det, c) in &chains.per_detector {
                let evaded = c.evaded_by.last().copied().unwrap_or(0);
                let _ = writeln!(
                    md,
                    "| {det} | {} | {} ({}) | {} | {} | {} |",
                    c.already_fn,
                    evaded,
                    pct_str(evaded, c.total),
                    c.survived,
                    c.chain_errors,
                    c.total
                );
            }
            let _ = writeln!(md);
            let _ = writeln!(md, "Cumulative counts per step budget are in `curves.csv`.");
            let _ = writeln!(md);
        }

        if let Some(occ) = &self.occlusion {
            let _ = writeln!(
                md,
                "## Occlusion (search detector `{}`, beta {})",
                occ.search_detector, occ.beta
            );
            let _ = writeln!(md);
            let mut header = String::from("| Variant |");
            let mut rule = String::from("|---|");
            for det in occ.no_occlusion.keys() {
                let _ = write!(header, " {det} detect% |");
                rule.push_str("---|");
            }
            header.push_str(" Mean window | Mean calls |");
            rule.push_str("---|---|");
            let _ = writeln!(md, "{header}");
            let _ = writeln!(md, "{rule}");
            let mut base_row = String::from("| none |");
            for f in occ.no_occlusion.values() {
                let _ = write!(base_row, " {} |", pct_str(f.num, f.den));
            }
            base_row.push_str(" - | - |");
            let _ = writeln!(md, "{base_row}");
            for (mode, s) in &occ.per_mode {
                let mut row = format!("| {mode} |");
                for f in s.detection.values() {
                    let _ = write!(row, " {} |", pct_str(f.num, f.den));
                }
                if s.produced == 0 {
                    row.push_str(" - | - |");
                } else {
                    let _ = write!(row, " {:.0} | {:.1} |", s.mean_window_len(), s.mean_calls());
                }
                let _ = writeln!(md, "{row}");
            }
            let _ = writeln!(md);
            for (mode, s) in &occ.per_mode {
                if s.already_benign > 0 || !s.failures.is_empty() {
                    let _ = writeln!(
                        md,
                        "- `{mode}`: {} of {} skipped as already benign, {} failed",
                        s.already_benign,
                        s.attempted,
                        s.failures.len()
                    );
                }
            }
            let _ = writeln!(md);
        }

        if let Some(p) = &self.packing {
            let _ = writeln!(md, "## Packing");
            let _ = writeln!(md);
            let _ = writeln!(
                md,
                "| Detector | Benign | Packed Benign | Malware | Packed Malware |"
            );
            let _ = writeln!(md, "|---|---|---|---|---|");
            for (det, q) in &p.per_detector {
                let _ = writeln!(
                    md,
                    "| {det} | {} | {} | {} | {} |",
                    pct_str(q.benign.num, q.benign.den),
                    pct_str(q.packed_benign.num, q.packed_benign.den),
                    pct_str(q.malware.num, q.malware.den),
                    pct_str(q.packed_malware.num, q.packed_malware.den),
                );
            }
            let _ = writeln!(md);
            let _ = writeln!(
                md,
                "Packed {} of {} files; {} pack failures excluded from the packed columns.",
                p.packed,
                p.attempted,
                p.pack_failures.len()
            );
            let _ = writeln!(md);
        }

        if let Some(m) = &self.external_mutator {
            let _ = writeln!(md, "## External mutator");
            let _ = writeln!(md);
            let _ = writeln!(md, "| Detector | Benign acc% | Detected after% | Lift |");
            let _ = writeln!(md, "|---|---|---|---|");
            for (det, row) in &m.per_detector {
                let _ = writeln!(
                    md,
                    "| {det} | {} | {} | {:+.1} |",
                    pct_str(row.pre_benign.num, row.pre_benign.den),
                    pct_str(row.post_detect.num, row.post_detect.den),
                    row.lift
                );
            }
            let _ = writeln!(md);
            let _ = writeln!(
                md,
                "Transformed {} of {} files; {} tool failures excluded.",
                m.transformed,
                m.attempted,
                m.failures.len()
            );
            let _ = writeln!(md);
        }

        md
    }
}

fn pct_str(num: u64, den: u64) -> String {
    if den == 0 {
        "-".to_string()
    } else {
        format!("{:.1}%", 100.0 * num as f64 / den as f64)
    }
}

//! Experiment engine: baseline evaluation, the evasion techniques, and
//! the per-file ledger every report is derived from.
//!
//! All experiment functions are deterministic given (corpus digest, master
//! seed, config): per-file seeds derive from the master seed and the
//! file's hash, never from worker scheduling. Results are collected in
//! corpus order before any aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use gauntlet_core::detect::{Decision, DetectorHandle, ScanResult};
use gauntlet_core::metrics::{
    compute_lift, compute_metrics, ConfusionCounts, EvasionCurve, Metrics, MetricsError,
};
use gauntlet_core::mutate::{apply_random_chain, apply_seeded, ChainResult, ChainStatus};
use gauntlet_core::occlude::{
    targeted_occlusion_attack, undirected_occlusion, BenignPool, ByteSource, OcclusionConfig,
    OcclusionError, TieBreak,
};
use gauntlet_core::pe::{parse_pe, sha256_digest, Label, RawBinary};
use gauntlet_core::seed::derive_seed;

use crate::corpus::ManifestEntry;
use crate::exttool::{ToolError, ToolTemplate};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("corpus selection is empty")]
    EmptyCorpus,
    #[error("technique requires files labeled {0} only")]
    WrongLabels(Label),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("adversarial occlusion needs a non-empty benign pool")]
    EmptyBenignPool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io { path: path.to_path_buf(), source }
}

/// Run `f` over `items` on a small worker pool, returning results in input
/// order regardless of scheduling.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let cursor = AtomicUsize::new(0);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let f = &f;
            let cursor = &cursor;
            s.spawn(move || loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, f(&items[i]))).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    for (i, r) in rx {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|o| o.expect("worker produced every slot")).collect()
}

fn timed_scan(det: &DetectorHandle, bytes: &[u8]) -> Result<ScanResult, String> {
    let t0 = Instant::now();
    match det.scan(bytes) {
        Ok(mut r) => {
            r.latency = t0.elapsed();
            Ok(r)
        }
        Err(e) => Err(e.to_string()),
    }
}

/// One line of the JSON-lines ledger. Every aggregate in a report can be
/// recomputed from these.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LedgerRecord {
    pub technique: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector: Option<String>,
    pub sha256: String,
    pub label: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

impl LedgerRecord {
    pub fn new(technique: &str, sha256: String, label: Label) -> Self {
        LedgerRecord {
            technique: technique.to_string(),
            mode: None,
            detector: None,
            sha256,
            label,
            step: None,
            seed: None,
            out_sha256: None,
            score: None,
            decision: None,
            latency_ms: None,
            error: None,
            detail: None,
        }
    }

    fn with_scan(mut self, scan: &Result<ScanResult, String>) -> Self {
        match scan {
            Ok(r) => {
                self.score = Some(r.score);
                self.decision = Some(r.decision);
                self.latency_ms = Some(r.latency.as_millis() as u64);
            }
            Err(e) => self.error = Some(e.clone()),
        }
        self
    }
}

/// Append-only JSON-lines sink. `disabled()` swallows records for callers
/// that only want the in-memory outcome.
pub struct Ledger {
    out: Option<BufWriter<fs::File>>,
    written: u64,
}

impl Ledger {
    pub fn create(path: &Path) -> Result<Self, EngineError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        Ok(Ledger { out: Some(BufWriter::new(file)), written: 0 })
    }

    pub fn disabled() -> Self {
        Ledger { out: None, written: 0 }
    }

    pub fn write(&mut self, record: &LedgerRecord) -> Result<(), EngineError> {
        self.written += 1;
        if let Some(w) = self.out.as_mut() {
            let line = serde_json::to_string(record).expect("ledger records serialize");
            writeln!(w, "{line}").map_err(|e| EngineError::Io {
                path: PathBuf::from("ledger"),
                source: e,
            })?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64, EngineError> {
        if let Some(w) = self.out.as_mut() {
            w.flush().map_err(|e| EngineError::Io { path: PathBuf::from("ledger"), source: e })?;
        }
        Ok(self.written)
    }
}

/// A numerator over a denominator, kept as counts so tables can be audited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn pct(&self) -> f64 {
        if self.den == 0 {
            f64::NAN
        } else {
            100.0 * self.num as f64 / self.den as f64
        }
    }

    fn bump(&mut self, hit: bool) {
        self.den += 1;
        if hit {
            self.num += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// baseline

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub detector: String,
    pub counts: ConfusionCounts,
    pub n_malicious: u64,
    pub n_benign: u64,
    pub failures: Vec<(String, String)>,
    /// (sha, label, scan) per file, corpus order; reused by other stages.
    pub rows: Vec<(String, Label, Result<ScanResult, String>)>,
}

impl BaselineOutcome {
    pub fn metrics(&self) -> Result<Metrics, MetricsError> {
        compute_metrics(&self.counts, self.n_malicious, self.n_benign)
    }
}

/// Scan every file with every detector; count Table-1 cells per detector.
/// Files that fail to load or scan are excluded from counts and listed.
pub fn baseline_eval(
    entries: &[&ManifestEntry],
    detectors: &[&DetectorHandle],
    workers: usize,
    ledger: &mut Ledger,
) -> Result<Vec<BaselineOutcome>, EngineError> {
    if entries.is_empty() {
        return Err(EngineError::EmptyCorpus);
    }
    let per_file = parallel_map(entries, workers, |e| match e.load() {
        Err(err) => Err(err.to_string()),
        Ok(bin) => Ok(detectors
            .iter()
            .map(|det| timed_scan(det, bin.bytes()))
            .collect::<Vec<_>>()),
    });

    let mut outcomes = Vec::with_capacity(detectors.len());
    for (d, det) in detectors.iter().enumerate() {
        let mut counts = ConfusionCounts::default();
        let mut n_malicious = 0;
        let mut n_benign = 0;
        let mut failures = Vec::new();
        let mut rows = Vec::with_capacity(entries.len());
        for (entry, file_result) in entries.iter().zip(&per_file) {
            let sha = entry.sha256_hex();
            let scan: Result<ScanResult, String> = match file_result {
                Err(load) => Err(load.clone()),
                Ok(scans) => scans[d].clone(),
            };
            match &scan {
                Ok(r) => {
                    counts.record(entry.label, r.decision);
                    match entry.label {
                        Label::Malicious => n_malicious += 1,
                        Label::Benign => n_benign += 1,
                        Label::Unknown => {}
                    }
                }
                Err(e) => failures.push((sha.clone(), e.clone())),
            }
            let mut rec = LedgerRecord::new("baseline", sha.clone(), entry.label).with_scan(&scan);
            rec.detector = Some(det.id.clone());
            ledger.write(&rec)?;
            rows.push((sha, entry.label, scan));
        }
        outcomes.push(BaselineOutcome {
            detector: det.id.clone(),
            counts,
            n_malicious,
            n_benign,
            failures,
            rows,
        });
    }
    Ok(outcomes)
}

// ---------------------------------------------------------------------------
// benign-modification chains

#[derive(Debug, Clone)]
pub struct EvadeOutcome {
    pub detector: String,
    pub curve: EvasionCurve,
    pub errors: Vec<(String, String)>,
    /// (sha, chain) per file, corpus order.
    pub chains: Vec<(String, Result<ChainResult, String>)>,
}

/// Run seeded modification chains against each detector independently.
/// Chain errors count the file as survived and are listed.
pub fn run_benign_mod_experiment(
    entries: &[&ManifestEntry],
    detectors: &[&DetectorHandle],
    max_steps: u32,
    master_seed: u64,
    workers: usize,
    ledger: &mut Ledger,
) -> Result<Vec<EvadeOutcome>, EngineError> {
    if entries.is_empty() {
        return Err(EngineError::EmptyCorpus);
    }
    if entries.iter().any(|e| e.label != Label::Malicious) {
        return Err(EngineError::WrongLabels(Label::Malicious));
    }
    let mut outcomes = Vec::with_capacity(detectors.len());
    for det in detectors {
        let results = parallel_map(entries, workers, |e| {
            let bin = e.load().map_err(|err| err.to_string())?;
            let seed = derive_seed(master_seed, &[b"chain", det.id.as_bytes(), &e.sha256]);
            apply_random_chain(&bin, det, max_steps, seed).map_err(|err| err.to_string())
        });
        let mut curve = EvasionCurve::new(det.id.clone(), max_steps);
        let mut errors = Vec::new();
        let mut chains = Vec::with_capacity(entries.len());
        for (entry, result) in entries.iter().zip(results) {
            let sha = entry.sha256_hex();
            match &result {
                Ok(r) => {
                    match r.status {
                        ChainStatus::AlreadyEvading => curve.record_already_fn(),
                        ChainStatus::Evaded { step } => curve.record_chain(Some(step)),
                        ChainStatus::Survived => curve.record_chain(None),
                    }
                    let mut rec =
                        LedgerRecord::new("benign_chain", sha.clone(), entry.label);
                    rec.detector = Some(det.id.clone());
                    rec.score = Some(r.baseline_score);
                    rec.detail = Some(chain_detail(r));
                    ledger.write(&rec)?;
                    for (k, step) in r.records.iter().enumerate() {
                        let mut rec =
                            LedgerRecord::new("benign_chain.step", sha.clone(), entry.label);
                        rec.detector = Some(det.id.clone());
                        rec.step = Some(k as u32 + 1);
                        rec.seed = Some(step.seed);
                        rec.out_sha256 = Some(hex::encode(step.post_sha256));
                        rec.score = Some(step.post_score);
                        rec.detail = Some(serde_json::to_value(&step.action).expect("action json"));
                        ledger.write(&rec)?;
                    }
                }
                Err(msg) => {
                    curve.record_chain(None); // survived-with-error
                    errors.push((sha.clone(), msg.clone()));
                    let mut rec = LedgerRecord::new("benign_chain", sha.clone(), entry.label);
                    rec.detector = Some(det.id.clone());
                    rec.error = Some(msg.clone());
                    ledger.write(&rec)?;
                }
            }
            chains.push((sha, result));
        }
        outcomes.push(EvadeOutcome { detector: det.id.clone(), curve, errors, chains });
    }
    Ok(outcomes)
}

fn chain_detail(r: &ChainResult) -> serde_json::Value {
    serde_json::json!({
        "status": r.status,
        "steps": r.records.len(),
        "noops": r.records.iter().filter(|s| s.noop).count(),
    })
}

/// Replay a finished chain and write each step's bytes to
/// `<orig-sha>.step<k>.bin`. Verifies every replayed step against the
/// recorded hash.
pub fn emit_chain_files(
    bin: &RawBinary,
    chain: &ChainResult,
    dir: &Path,
) -> Result<Vec<PathBuf>, EngineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let orig = hex::encode(bin.sha256());
    let mut current = bin.bytes().to_vec();
    let mut written = Vec::new();
    for (k, step) in chain.records.iter().enumerate() {
        let pe = parse_pe(RawBinary::new(current, Label::Unknown, bin.origin()).expect("non-empty"))
            .expect("chain steps parsed during the run");
        let out = apply_seeded(&pe, step.action.kind(), step.seed)
            .expect("chain steps applied during the run");
        assert_eq!(
            sha256_digest(&out.bytes),
            step.post_sha256,
            "replay diverged from the recorded chain"
        );
        let path = dir.join(format!("{orig}.step{}.bin", k + 1));
        fs::write(&path, &out.bytes).map_err(io_err(&path))?;
        written.push(path);
        current = out.bytes;
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// occlusion

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionMode {
    Undirected,
    TargetedRandom,
    TargetedAdversarial,
}

impl OcclusionMode {
    pub fn name(self) -> &'static str {
        match self {
            OcclusionMode::Undirected => "undirected",
            OcclusionMode::TargetedRandom => "targeted_random",
            OcclusionMode::TargetedAdversarial => "targeted_adversarial",
        }
    }

    pub const ALL: [OcclusionMode; 3] = [
        OcclusionMode::Undirected,
        OcclusionMode::TargetedRandom,
        OcclusionMode::TargetedAdversarial,
    ];
}

impl std::str::FromStr for OcclusionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "undirected" => Ok(OcclusionMode::Undirected),
            "targeted_random" => Ok(OcclusionMode::TargetedRandom),
            "targeted_adversarial" => Ok(OcclusionMode::TargetedAdversarial),
            other => Err(format!(
                "unknown occlusion mode {other:?} (expected undirected, targeted-random, or targeted-adversarial)"
            )),
        }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct OcclusionModeSummary {
    pub attempted: u64,
    /// Files for which an occluded variant exists.
    pub produced: u64,
    /// Files the search detector already called benign (targeted modes).
    pub already_benign: u64,
    pub failures: Vec<(String, String)>,
    pub total_search_calls: u64,
    pub total_window_len: u64,
    /// Per detector: malicious verdicts over scanned occluded files.
    pub detection: BTreeMap<String, Fraction>,
}

impl OcclusionModeSummary {
    pub fn mean_calls(&self) -> f64 {
        if self.produced == 0 {
            f64::NAN
        } else {
            self.total_search_calls as f64 / self.produced as f64
        }
    }

    pub fn mean_window_len(&self) -> f64 {
        if self.produced == 0 {
            f64::NAN
        } else {
            self.total_window_len as f64 / self.produced as f64
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct OcclusionResults {
    pub search_detector: String,
    pub beta: usize,
    /// Detection rate on the unmodified files, per detector.
    pub no_occlusion: BTreeMap<String, Fraction>,
    pub per_mode: BTreeMap<String, OcclusionModeSummary>,
}

struct OcclusionProduct {
    start: usize,
    end: usize,
    calls: u32,
    out_sha: String,
    scans: Vec<Result<ScanResult, String>>,
}

enum OcclusionFileOutcome {
    Produced(OcclusionProduct),
    AlreadyBenign,
    Failed(String),
}

/// Search every malicious file against the designated detector, occlude,
/// and replay each occluded variant against all detectors. `Undirected`
/// mode places its window without any detector calls.
#[allow(clippy::too_many_arguments)]
pub fn run_occlusion_experiment(
    entries: &[&ManifestEntry],
    search_detector: &DetectorHandle,
    detectors: &[&DetectorHandle],
    beta: usize,
    modes: &[OcclusionMode],
    benign_pool: Option<BenignPool>,
    master_seed: u64,
    workers: usize,
    emit_dir: Option<&Path>,
    ledger: &mut Ledger,
) -> Result<OcclusionResults, EngineError> {
    if entries.is_empty() {
        return Err(EngineError::EmptyCorpus);
    }
    if entries.iter().any(|e| e.label != Label::Malicious) {
        return Err(EngineError::WrongLabels(Label::Malicious));
    }
    if modes.contains(&OcclusionMode::TargetedAdversarial) && benign_pool.is_none() {
        return Err(EngineError::EmptyBenignPool);
    }
    if let Some(dir) = emit_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    type FileResult = (Result<Vec<Result<ScanResult, String>>, String>, Vec<OcclusionFileOutcome>);
    let results: Vec<FileResult> = parallel_map(entries, workers, |e| {
        let bin = match e.load() {
            Ok(b) => b,
            Err(err) => {
                let msg = err.to_string();
                return (
                    Err(msg.clone()),
                    modes.iter().map(|_| OcclusionFileOutcome::Failed(msg.clone())).collect(),
                );
            }
        };
        let baseline: Vec<Result<ScanResult, String>> =
            detectors.iter().map(|det| timed_scan(det, bin.bytes())).collect();
        let mut mode_outcomes = Vec::with_capacity(modes.len());
        for &mode in modes {
            let seed = derive_seed(
                master_seed,
                &[b"occlusion", mode.name().as_bytes(), &e.sha256],
            );
            let produced: Result<(Vec<u8>, usize, usize, u32), OcclusionError> = match mode {
                OcclusionMode::Undirected => undirected_occlusion(bin.bytes(), beta, seed)
                    .map(|(bytes, (start, end))| (bytes, start, end, 0)),
                OcclusionMode::TargetedRandom | OcclusionMode::TargetedAdversarial => {
                    let source = match mode {
                        OcclusionMode::TargetedRandom => ByteSource::RandomUniform { seed },
                        _ => ByteSource::BenignSample {
                            pool: benign_pool.clone().expect("checked above"),
                            seed,
                        },
                    };
                    let cfg = OcclusionConfig { beta, tie_break: TieBreak::Left, source };
                    targeted_occlusion_attack(bin.bytes(), search_detector, &cfg).map(|attack| {
                        (
                            attack.bytes,
                            attack.search.start,
                            attack.search.end,
                            attack.search.calls,
                        )
                    })
                }
            };
            mode_outcomes.push(match produced {
                Err(OcclusionError::BaselineNotMalicious) => OcclusionFileOutcome::AlreadyBenign,
                Err(err) => OcclusionFileOutcome::Failed(err.to_string()),
                Ok((bytes, start, end, calls)) => {
                    let out_sha = hex::encode(sha256_digest(&bytes));
                    if let Some(dir) = emit_dir {
                        let name = format!("{}.occl.{}.bin", e.sha256_hex(), mode.name());
                        // failures surface later through the scan results;
                        // an unwritable dir would already have failed above
                        let _ = fs::write(dir.join(name), &bytes);
                    }
                    let scans =
                        detectors.iter().map(|det| timed_scan(det, &bytes)).collect();
                    OcclusionFileOutcome::Produced(OcclusionProduct {
                        start,
                        end,
                        calls,
                        out_sha,
                        scans,
                    })
                }
            });
        }
        (Ok(baseline), mode_outcomes)
    });

    let mut no_occlusion: BTreeMap<String, Fraction> =
        detectors.iter().map(|d| (d.id.clone(), Fraction::default())).collect();
    let mut per_mode: BTreeMap<String, OcclusionModeSummary> = modes
        .iter()
        .map(|m| {
            let mut s = OcclusionModeSummary::default();
            s.detection =
                detectors.iter().map(|d| (d.id.clone(), Fraction::default())).collect();
            (m.name().to_string(), s)
        })
        .collect();

    for (entry, (baseline, mode_outcomes)) in entries.iter().zip(&results) {
        let sha = entry.sha256_hex();
        match baseline {
            Ok(scans) => {
                for (det, scan) in detectors.iter().zip(scans) {
                    if let Ok(r) = scan {
                        no_occlusion
                            .get_mut(&det.id)
                            .expect("seeded above")
                            .bump(r.decision == Decision::Malicious);
                    }
                    let mut rec =
                        LedgerRecord::new("occlusion", sha.clone(), entry.label).with_scan(scan);
                    rec.mode = Some("no_occlusion".into());
                    rec.detector = Some(det.id.clone());
                    ledger.write(&rec)?;
                }
            }
            Err(msg) => {
                let mut rec = LedgerRecord::new("occlusion", sha.clone(), entry.label);
                rec.mode = Some("no_occlusion".into());
                rec.error = Some(msg.clone());
                ledger.write(&rec)?;
            }
        }
        for (mode, outcome) in modes.iter().zip(mode_outcomes) {
            let summary = per_mode.get_mut(mode.name()).expect("seeded above");
            summary.attempted += 1;
            match outcome {
                OcclusionFileOutcome::AlreadyBenign => {
                    summary.already_benign += 1;
                    let mut rec = LedgerRecord::new("occlusion", sha.clone(), entry.label);
                    rec.mode = Some(mode.name().into());
                    rec.detail = Some(serde_json::json!({"skipped": "already_benign"}));
                    ledger.write(&rec)?;
                }
                OcclusionFileOutcome::Failed(msg) => {
                    summary.failures.push((sha.clone(), msg.clone()));
                    let mut rec = LedgerRecord::new("occlusion", sha.clone(), entry.label);
                    rec.mode = Some(mode.name().into());
                    rec.error = Some(msg.clone());
                    ledger.write(&rec)?;
                }
                OcclusionFileOutcome::Produced(p) => {
                    summary.produced += 1;
                    summary.total_search_calls += p.calls as u64;
                    summary.total_window_len += (p.end - p.start) as u64;
                    for (det, scan) in detectors.iter().zip(&p.scans) {
                        if let Ok(r) = scan {
                            summary
                                .detection
                                .get_mut(&det.id)
                                .expect("seeded above")
                                .bump(r.decision == Decision::Malicious);
                        }
                        let mut rec = LedgerRecord::new("occlusion", sha.clone(), entry.label)
                            .with_scan(scan);
                        rec.mode = Some(mode.name().into());
                        rec.detector = Some(det.id.clone());
                        rec.out_sha256 = Some(p.out_sha.clone());
                        rec.detail = Some(serde_json::json!({
                            "window": [p.start, p.end],
                            "search_calls": p.calls,
                        }));
                        ledger.write(&rec)?;
                    }
                }
            }
        }
    }

    Ok(OcclusionResults {
        search_detector: search_detector.id.clone(),
        beta,
        no_occlusion,
        per_mode,
    })
}

// ---------------------------------------------------------------------------
// packing

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct PackingQuadrants {
    /// Correct (benign) verdicts on unpacked benign files.
    pub benign: Fraction,
    /// Correct (benign) verdicts on packed benign files.
    pub packed_benign: Fraction,
    /// Correct (malicious) verdicts on unpacked malware.
    pub malware: Fraction,
    /// Correct (malicious) verdicts on packed malware.
    pub packed_malware: Fraction,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PackingOutcome {
    pub per_detector: BTreeMap<String, PackingQuadrants>,
    pub pack_failures: Vec<(String, String)>,
    pub packed: u64,
    pub attempted: u64,
}

/// Pack every file, scan both versions with every detector, and fill the
/// four-column table. A missing packer aborts; per-file failures exclude
/// the file from the packed columns only.
pub fn run_packing_experiment(
    entries: &[&ManifestEntry],
    detectors: &[&DetectorHandle],
    tool: &ToolTemplate,
    tool_timeout: Duration,
    workers: usize,
    work_dir: &Path,
    ledger: &mut Ledger,
) -> Result<PackingOutcome, EngineError> {
    if entries.is_empty() {
        return Err(EngineError::EmptyCorpus);
    }
    fs::create_dir_all(work_dir).map_err(io_err(work_dir))?;

    struct FileRow {
        orig: Result<Vec<Result<ScanResult, String>>, String>,
        packed: Result<(String, Vec<Result<ScanResult, String>>), ToolError>,
    }
    let rows: Vec<FileRow> = parallel_map(entries, workers, |e| {
        let bin = match e.load() {
            Ok(b) => b,
            Err(err) => {
                return FileRow {
                    orig: Err(err.to_string()),
                    packed: Err(ToolError::NoOutput(e.path.clone())),
                }
            }
        };
        let orig = detectors.iter().map(|det| timed_scan(det, bin.bytes())).collect();
        let packed = tool.run(&e.path, work_dir, tool_timeout).and_then(|out_path| {
            let bytes = fs::read(&out_path)
                .map_err(|err| ToolError::Launch { program: "read output".into(), source: err })?;
            let sha = hex::encode(sha256_digest(&bytes));
            Ok((sha, detectors.iter().map(|det| timed_scan(det, &bytes)).collect()))
        });
        FileRow { orig: Ok(orig), packed }
    });

    // a fatal tool error (missing binary) aborts rather than producing an
    // empty table that looks like a finding
    for row in &rows {
        if let Err(e) = &row.packed {
            if e.is_fatal() {
                return Err(EngineError::Tool(ToolError::ToolMissing(
                    tool.program().to_string(),
                )));
            }
        }
    }

    let mut per_detector: BTreeMap<String, PackingQuadrants> =
        detectors.iter().map(|d| (d.id.clone(), PackingQuadrants::default())).collect();
    let mut pack_failures = Vec::new();
    let mut packed_count = 0u64;

    for (entry, row) in entries.iter().zip(&rows) {
        let sha = entry.sha256_hex();
        match &row.orig {
            Ok(scans) => {
                for (det, scan) in detectors.iter().zip(scans) {
                    if let Ok(r) = scan {
                        let q = per_detector.get_mut(&det.id).expect("seeded above");
                        match entry.label {
                            Label::Benign => q.benign.bump(r.decision == Decision::Benign),
                            Label::Malicious => q.malware.bump(r.decision == Decision::Malicious),
                            Label::Unknown => {}
                        }
                    }
                    let mut rec =
                        LedgerRecord::new("packing", sha.clone(), entry.label).with_scan(scan);
                    rec.mode = Some("original".into());
                    rec.detector = Some(det.id.clone());
                    ledger.write(&rec)?;
                }
            }
            Err(msg) => {
                let mut rec = LedgerRecord::new("packing", sha.clone(), entry.label);
                rec.mode = Some("original".into());
                rec.error = Some(msg.clone());
                ledger.write(&rec)?;
            }
        }
        match &row.packed {
            Ok((out_sha, scans)) => {
                packed_count += 1;
                for (det, scan) in detectors.iter().zip(scans) {
                    if let Ok(r) = scan {
                        let q = per_detector.get_mut(&det.id).expect("seeded above");
                        match entry.label {
                            Label::Benign => q.packed_benign.bump(r.decision == Decision::Benign),
                            Label::Malicious => {
                                q.packed_malware.bump(r.decision == Decision::Malicious)
                            }
                            Label::Unknown => {}
                        }
                    }
                    let mut rec =
                        LedgerRecord::new("packing", sha.clone(), entry.label).with_scan(scan);
                    rec.mode = Some("packed".into());
                    rec.detector = Some(det.id.clone());
                    rec.out_sha256 = Some(out_sha.clone());
                    ledger.write(&rec)?;
                }
            }
            Err(err) => {
                pack_failures.push((sha.clone(), err.to_string()));
                let mut rec = LedgerRecord::new("packing", sha.clone(), entry.label);
                rec.mode = Some("packed".into());
                rec.error = Some(err.to_string());
                ledger.write(&rec)?;
            }
        }
    }

    Ok(PackingOutcome {
        per_detector,
        pack_failures,
        packed: packed_count,
        attempted: entries.len() as u64,
    })
}

// ---------------------------------------------------------------------------
// external mutator

#[derive(Debug, Clone, serde::Serialize)]
pub struct MutatorRow {
    /// Benign verdicts on the originals (pre-transformation accuracy).
    pub pre_benign: Fraction,
    /// Malicious verdicts on the transformed files.
    pub post_detect: Fraction,
    pub lift: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MutatorOutcome {
    pub per_detector: BTreeMap<String, MutatorRow>,
    pub failures: Vec<(String, String)>,
    pub transformed: u64,
    pub attempted: u64,
}

/// Feed benign files through an external transformer that implants
/// malicious functionality; measure how much of the post-transformation
/// detection is genuine (lift) versus inherited false positives.
pub fn run_external_mutator_experiment(
    entries: &[&ManifestEntry],
    detectors: &[&DetectorHandle],
    tool: &ToolTemplate,
    tool_timeout: Duration,
    workers: usize,
    work_dir: &Path,
    ledger: &mut Ledger,
) -> Result<MutatorOutcome, EngineError> {
    if entries.is_empty() {
        return Err(EngineError::EmptyCorpus);
    }
    if entries.iter().any(|e| e.label != Label::Benign) {
        return Err(EngineError::WrongLabels(Label::Benign));
    }
    fs::create_dir_all(work_dir).map_err(io_err(work_dir))?;

    struct FileRow {
        orig: Result<Vec<Result<ScanResult, String>>, String>,
        mutated: Result<(String, Vec<Result<ScanResult, String>>), ToolError>,
    }
    let rows: Vec<FileRow> = parallel_map(entries, workers, |e| {
        let bin = match e.load() {
            Ok(b) => b,
            Err(err) => {
                return FileRow {
                    orig: Err(err.to_string()),
                    mutated: Err(ToolError::NoOutput(e.path.clone())),
                }
            }
        };
        let orig = detectors.iter().map(|det| timed_scan(det, bin.bytes())).collect();
        let mutated = tool.run(&e.path, work_dir, tool_timeout).and_then(|out_path| {
            let bytes = fs::read(&out_path)
                .map_err(|err| ToolError::Launch { program: "read output".into(), source: err })?;
            let sha = hex::encode(sha256_digest(&bytes));
            Ok((sha, detectors.iter().map(|det| timed_scan(det, &bytes)).collect()))
        });
        FileRow { orig: Ok(orig), mutated }
    });

    for row in &rows {
        if let Err(e) = &row.mutated {
            if e.is_fatal() {
                return Err(EngineError::Tool(ToolError::ToolMissing(
                    tool.program().to_string(),
                )));
            }
        }
    }

    let mut pre: BTreeMap<String, Fraction> =
        detectors.iter().map(|d| (d.id.clone(), Fraction::default())).collect();
    let mut post: BTreeMap<String, Fraction> =
        detectors.iter().map(|d| (d.id.clone(), Fraction::default())).collect();
    let mut failures = Vec::new();
    let mut transformed = 0u64;

    for (entry, row) in entries.iter().zip(&rows) {
        let sha = entry.sha256_hex();
        if let Ok(scans) = &row.orig {
            for (det, scan) in detectors.iter().zip(scans) {
                if let Ok(r) = scan {
                    pre.get_mut(&det.id)
                        .expect("seeded above")
                        .bump(r.decision == Decision::Benign);
                }
                let mut rec =
                    LedgerRecord::new("external_mutator", sha.clone(), entry.label)
                        .with_scan(scan);
                rec.mode = Some("original".into());
                rec.detector = Some(det.id.clone());
                ledger.write(&rec)?;
            }
        }
        match &row.mutated {
            Ok((out_sha, scans)) => {
                transformed += 1;
                for (det, scan) in detectors.iter().zip(scans) {
                    if let Ok(r) = scan {
                        post.get_mut(&det.id)
                            .expect("seeded above")
                            .bump(r.decision == Decision::Malicious);
                    }
                    let mut rec =
                        LedgerRecord::new("external_mutator", sha.clone(), Label::Malicious)
                            .with_scan(scan);
                    rec.mode = Some("transformed".into());
                    rec.detector = Some(det.id.clone());
                    rec.out_sha256 = Some(out_sha.clone());
                    ledger.write(&rec)?;
                }
            }
            Err(err) => {
                failures.push((sha.clone(), err.to_string()));
                let mut rec = LedgerRecord::new("external_mutator", sha.clone(), entry.label);
                rec.mode = Some("transformed".into());
                rec.error = Some(err.to_string());
                ledger.write(&rec)?;
            }
        }
    }

    let per_detector = detectors
        .iter()
        .map(|d| {
            let p = pre[&d.id];
            let q = post[&d.id];
            (
                d.id.clone(),
                MutatorRow { pre_benign: p, post_detect: q, lift: compute_lift(p.pct(), q.pct()) },
            )
        })
        .collect();

    Ok(MutatorOutcome {
        per_detector,
        failures,
        transformed,
        attempted: entries.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic_corpus;
    use gauntlet_core::detect::SignatureEngine;
    use gauntlet_core::synth::MALICIOUS_MOTIF;

    fn motif_detector() -> DetectorHandle {
        DetectorHandle::new(
            "motif",
            Box::new(SignatureEngine::new(MALICIOUS_MOTIF.to_vec())),
        )
    }

    fn constant(id: &str, score: f64) -> DetectorHandle {
        DetectorHandle::new(id, Box::new(move |_: &[u8]| score))
    }

    #[test]
    fn baseline_with_a_perfect_oracle_fills_the_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(5, 21, dir.path()).unwrap();
        let det = motif_detector();
        let entries: Vec<&ManifestEntry> = corpus.entries().iter().collect();
        let mut ledger = Ledger::disabled();
        let out = baseline_eval(&entries, &[&det], 2, &mut ledger).unwrap();
        assert_eq!(out.len(), 1);
        let b = &out[0];
        assert_eq!(b.counts.true_pos, 5);
        assert_eq!(b.counts.true_neg, 5);
        assert_eq!(b.counts.false_pos, 0);
        assert_eq!(b.counts.false_neg, 0);
        assert!(b.failures.is_empty());
        let m = b.metrics().unwrap();
        assert_eq!(m.accuracy_pct, 100.0);
    }

    #[test]
    fn baseline_is_order_stable_across_worker_counts() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(6, 3, dir.path()).unwrap();
        let det = motif_detector();
        let entries: Vec<&ManifestEntry> = corpus.entries().iter().collect();
        let serial =
            baseline_eval(&entries, &[&det], 1, &mut Ledger::disabled()).unwrap();
        let parallel =
            baseline_eval(&entries, &[&det], 4, &mut Ledger::disabled()).unwrap();
        let shas = |o: &BaselineOutcome| {
            o.rows.iter().map(|(s, _, _)| s.clone()).collect::<Vec<_>>()
        };
        assert_eq!(shas(&serial[0]), shas(&parallel[0]));
        assert_eq!(serial[0].counts, parallel[0].counts);
    }

    #[test]
    fn chains_against_a_constant_detector_all_survive() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(3, 5, dir.path()).unwrap();
        let det = constant("always", 1.0);
        let malicious: Vec<&ManifestEntry> = corpus
            .entries()
            .iter()
            .filter(|e| e.label == Label::Malicious)
            .collect();
        let out = run_benign_mod_experiment(
            &malicious,
            &[&det],
            5,
            9,
            2,
            &mut Ledger::disabled(),
        )
        .unwrap();
        let curve = &out[0].curve;
        assert_eq!(curve.survived, 3);
        assert_eq!(curve.already_fn, 0);
        assert!(curve.evaded_by.iter().all(|&c| c == 0));
        assert_eq!(curve.total(), 3);
    }

    #[test]
    fn chain_experiment_rejects_benign_files() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(2, 6, dir.path()).unwrap();
        let det = constant("always", 1.0);
        let all: Vec<&ManifestEntry> = corpus.entries().iter().collect();
        let err =
            run_benign_mod_experiment(&all, &[&det], 5, 9, 1, &mut Ledger::disabled())
                .unwrap_err();
        assert!(matches!(err, EngineError::WrongLabels(Label::Malicious)));
    }

    #[test]
    fn occlusion_no_occlusion_column_matches_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(4, 8, dir.path()).unwrap();
        let det = motif_detector();
        let malicious: Vec<&ManifestEntry> = corpus
            .entries()
            .iter()
            .filter(|e| e.label == Label::Malicious)
            .collect();
        let out = run_occlusion_experiment(
            &malicious,
            &det,
            &[&det],
            64,
            &[OcclusionMode::Undirected, OcclusionMode::TargetedRandom],
            None,
            77,
            2,
            None,
            &mut Ledger::disabled(),
        )
        .unwrap();
        let base = out.no_occlusion["motif"];
        assert_eq!(base.num, 4, "motif detector catches every original");
        assert_eq!(base.den, 4);
        // the targeted attack hunts the motif down: detection collapses
        let targeted = &out.per_mode["targeted_random"];
        assert_eq!(targeted.produced, 4);
        assert_eq!(targeted.detection["motif"].num, 0);
        // undirected windows almost never land on the 6-byte motif, but
        // either way every file produces a variant and a full denominator
        let undirected = &out.per_mode["undirected"];
        assert_eq!(undirected.produced, 4);
        assert_eq!(undirected.detection["motif"].den, 4);
    }

    #[test]
    fn adversarial_mode_without_a_pool_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(2, 4, dir.path()).unwrap();
        let det = motif_detector();
        let malicious: Vec<&ManifestEntry> = corpus
            .entries()
            .iter()
            .filter(|e| e.label == Label::Malicious)
            .collect();
        let err = run_occlusion_experiment(
            &malicious,
            &det,
            &[&det],
            64,
            &[OcclusionMode::TargetedAdversarial],
            None,
            1,
            1,
            None,
            &mut Ledger::disabled(),
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::EmptyBenignPool));
    }

    #[test]
    fn identity_packer_reproduces_baseline_quadrants() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(4, 13, dir.path()).unwrap();
        let det = motif_detector();
        let entries: Vec<&ManifestEntry> = corpus.entries().iter().collect();
        let tool = ToolTemplate::parse("cp {in} {out}").unwrap();
        let work = dir.path().join("packed");
        let out = run_packing_experiment(
            &entries,
            &[&det],
            &tool,
            Duration::from_secs(30),
            2,
            &work,
            &mut Ledger::disabled(),
        )
        .unwrap();
        let q = &out.per_detector["motif"];
        assert_eq!(q.benign, q.packed_benign);
        assert_eq!(q.malware, q.packed_malware);
        assert_eq!(q.benign.pct(), 100.0);
        assert_eq!(q.malware.pct(), 100.0);
        assert!(out.pack_failures.is_empty());
        assert_eq!(out.packed, 8);
    }

    #[test]
    fn failing_packer_excludes_files_without_aborting() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(2, 14, dir.path()).unwrap();
        let det = motif_detector();
        let entries: Vec<&ManifestEntry> = corpus.entries().iter().collect();
        let tool = ToolTemplate::parse("false {in} {out}").unwrap();
        let out = run_packing_experiment(
            &entries,
            &[&det],
            &tool,
            Duration::from_secs(5),
            1,
            &dir.path().join("packed"),
            &mut Ledger::disabled(),
        )
        .unwrap();
        assert_eq!(out.packed, 0);
        assert_eq!(out.pack_failures.len(), 4);
        let q = &out.per_detector["motif"];
        assert_eq!(q.packed_malware.den, 0, "no packed files to scan");
        assert_eq!(q.malware.den, 2, "originals still measured");
    }

    #[test]
    fn missing_packer_aborts_the_experiment() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(1, 15, dir.path()).unwrap();
        let det = motif_detector();
        let entries: Vec<&ManifestEntry> = corpus.entries().iter().collect();
        let tool = ToolTemplate::parse("no-such-packer-9e2b {in} {out}").unwrap();
        let err = run_packing_experiment(
            &entries,
            &[&det],
            &tool,
            Duration::from_secs(5),
            1,
            &dir.path().join("packed"),
            &mut Ledger::disabled(),
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::Tool(ToolError::ToolMissing(_))));
    }

    #[test]
    fn identity_mutator_has_zero_lift() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(5, 16, dir.path()).unwrap();
        let det = motif_detector();
        let benign: Vec<&ManifestEntry> = corpus
            .entries()
            .iter()
            .filter(|e| e.label == Label::Benign)
            .collect();
        let tool = ToolTemplate::parse("cp {in} {out}").unwrap();
        let out = run_external_mutator_experiment(
            &benign,
            &[&det],
            &tool,
            Duration::from_secs(30),
            2,
            &dir.path().join("mutated"),
            &mut Ledger::disabled(),
        )
        .unwrap();
        let row = &out.per_detector["motif"];
        assert_eq!(row.pre_benign.pct(), 100.0);
        assert_eq!(row.post_detect.pct(), 0.0);
        assert!(row.lift.abs() < 1e-12, "identity transform earns no lift");
    }

    #[test]
    fn ledger_lines_are_parseable_json() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(2, 17, dir.path()).unwrap();
        let det = motif_detector();
        let entries: Vec<&ManifestEntry> = corpus.entries().iter().collect();
        let path = dir.path().join("ledger.jsonl");
        let mut ledger = Ledger::create(&path).unwrap();
        baseline_eval(&entries, &[&det], 1, &mut ledger).unwrap();
        let written = ledger.finish().unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len() as u64, written);
        assert_eq!(lines.len(), 4);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["technique"], "baseline");
            assert!(v["score"].is_number());
        }
    }
}

//! Command-line front end: corpus management, training, scanning, and the
//! seeded evasion experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use gauntlet::adapter::{AdapterConfig, ExternalDetector};
use gauntlet::corpus::{
    self, generate_synthetic_corpus, ingest_dirs, ingest_manifest, is_marked_synthetic,
    write_manifest, Corpus, ManifestEntry,
};
use gauntlet::engine::{
    baseline_eval, emit_chain_files, run_benign_mod_experiment, run_external_mutator_experiment,
    run_occlusion_experiment, run_packing_experiment, EngineError, Ledger, OcclusionMode,
};
use gauntlet::exttool::ToolTemplate;
use gauntlet::model_io::{load_model, save_model, ModelIoError};
use gauntlet::report::EvaluationReport;
use gauntlet::runconfig::{ConfigError, RunConfig, TechniqueKind};
use gauntlet_core::detect::DetectorHandle;
use gauntlet_core::ngram::{train, TrainConfig, TrainSample, DEFAULT_N, DEFAULT_NUM_BUCKETS};
use gauntlet_core::occlude::{
    targeted_occlusion_attack, undirected_occlusion, BenignPool, ByteSource, OcclusionConfig,
    TieBreak,
};
use gauntlet_core::pe::{sha256_digest, Label};
use gauntlet_core::seed::derive_seed;

const SAFETY_BANNER: &str = "\
refusing to run: the corpus is not marked synthetic.\n\
\n\
  This command mutates and re-scans executables. Pointed at live malware\n\
  it will write mutated malicious files to disk. Only proceed on corpora\n\
  you are authorized to handle, inside an isolated environment.\n\
\n\
  Synthetic corpora produced by `corpus synth` carry a `.synthetic`\n\
  marker and run without ceremony. To proceed anyway, pass\n\
  --i-understand-live-malware.";

fn version_string() -> &'static str {
    Box::leak(
        format!(
            "{} (model format v{})",
            env!("CARGO_PKG_VERSION"),
            gauntlet::MODEL_FORMAT_VERSION
        )
        .into_boxed_str(),
    )
}

#[derive(Parser)]
#[command(name = "gauntlet", version = version_string(), about = "Measure static malware detectors under evasion transformations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build, sample, split, or synthesize corpora.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Train the byte n-gram model on a manifest's train split.
    Train(TrainArgs),
    /// Score a file or a manifest with one detector.
    Scan(ScanArgs),
    /// Run seeded modification chains against a detector.
    Evade(EvadeArgs),
    /// Occlusion search and attack, single file or batch.
    Occlude(OccludeArgs),
    /// Pack every file and compare detection before and after.
    Packeval(PackArgs),
    /// Run a full evaluation from a config file.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Walk benign and malicious directories into a manifest.
    Ingest {
        #[arg(long)]
        benign: PathBuf,
        #[arg(long)]
        malicious: PathBuf,
        /// Manifest to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a seeded subsample into a new manifest.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Restrict to one class.
        #[arg(long, value_parser = parse_label)]
        label: Option<Label>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reassign the train/test column with a seeded stratified split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a labeled synthetic corpus (n files per class).
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Directory for the files, manifest.csv, and synthetic marker.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_N)]
    ngram: u32,
    #[arg(long, default_value_t = DEFAULT_NUM_BUCKETS)]
    buckets: u64,
    #[arg(long, default_value_t = 10)]
    epochs: u32,
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-6)]
    l2: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

/// Detector selection shared by the scanning commands: a model file for
/// the built-in engine, or an adapter command line.
#[derive(Args)]
struct DetectorArgs {
    /// Model file for the built-in n-gram scanner.
    #[arg(long, conflicts_with = "adapter")]
    model: Option<PathBuf>,
    /// Adapter command (program and arguments, whitespace-split).
    #[arg(long)]
    adapter: Option<String>,
    /// Decision threshold for the built-in scanner.
    #[arg(long, requires = "model")]
    threshold: Option<f64>,
    /// Per-scan timeout for adapters.
    #[arg(long, requires = "adapter")]
    scan_timeout_ms: Option<u64>,
}

impl DetectorArgs {
    fn is_set(&self) -> bool {
        self.model.is_some() || self.adapter.is_some()
    }

    fn build(&self) -> Result<DetectorHandle, Failure> {
        if let Some(path) = &self.model {
            let model =
                load_model(path).map_err(|e| Failure::Runtime(e.to_string()))?;
            let mut handle = DetectorHandle::new("ngram", Box::new(model));
            if let Some(t) = self.threshold {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Failure::Usage("--threshold must lie in [0, 1]".into()));
                }
                handle = handle.with_threshold(t);
            }
            return Ok(handle);
        }
        if let Some(cmdline) = &self.adapter {
            let argv: Vec<String> =
                cmdline.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(Failure::Usage("--adapter command is empty".into()));
            }
            let mut cfg = AdapterConfig::new(argv);
            if let Some(ms) = self.scan_timeout_ms {
                cfg.scan_timeout = Duration::from_millis(ms);
            }
            let det = ExternalDetector::connect(cfg)
                .map_err(|e| Failure::Runtime(format!("adapter: {e}")))?;
            return Ok(DetectorHandle::new("adapter", Box::new(det)));
        }
        Err(Failure::Usage("pass --model FILE or --adapter CMD".into()))
    }
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    detector: DetectorArgs,
    /// Score a single file.
    #[arg(long, conflicts_with = "manifest")]
    file: Option<PathBuf>,
    /// Score every file in a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvadeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    max_steps: u32,
    /// Cap on malicious files drawn (seeded).
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory for the ledger, report, and curves.
    #[arg(long, default_value = "evade-out")]
    out: PathBuf,
    /// Also write each successful chain's intermediate files.
    #[arg(long)]
    emit: bool,
    #[arg(long)]
    i_understand_live_malware: bool,
}

#[derive(Args)]
struct OccludeArgs {
    /// Occlude a single file.
    #[arg(long, conflicts_with = "manifest")]
    file: Option<PathBuf>,
    /// Occlude every malicious file in a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    detector: DetectorArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 2048)]
    beta: usize,
    /// undirected | targeted-random | targeted-adversarial (repeatable
    /// in batch mode; batch default is all three).
    #[arg(long)]
    mode: Vec<OcclusionMode>,
    /// Manifest supplying benign bytes for targeted-adversarial.
    #[arg(long)]
    benign_pool: Option<PathBuf>,
    /// Cap on benign pool files (seeded subsample).
    #[arg(long, default_value_t = 32)]
    pool_cap: usize,
    /// Single file: where to write the occluded copy. Batch: output
    /// directory (default occlude-out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    i_understand_live_malware: bool,
}

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Packer command template with {in} and {out}.
    #[arg(long)]
    pack_cmd: String,
    #[arg(long, default_value_t = 60_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "packeval-out")]
    out: PathBuf,
    #[arg(long)]
    i_understand_live_malware: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    i_understand_live_malware: bool,
}

fn parse_label(s: &str) -> Result<Label, String> {
    match s {
        "benign" => Ok(Label::Benign),
        "malicious" => Ok(Label::Malicious),
        other => Err(format!("unknown label {other:?} (expected benign or malicious)")),
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<corpus::CorpusError> for Failure {
    fn from(e: corpus::CorpusError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<ModelIoError> for Failure {
    fn from(e: ModelIoError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            // problems inside the config file are usage errors; failures
            // while materializing detectors are runtime errors
            ConfigError::Io { .. }
            | ConfigError::Parse { .. }
            | ConfigError::Field { .. }
            | ConfigError::Tool(_) => Failure::Usage(e.to_string()),
            ConfigError::Model(_) | ConfigError::Detector { .. } => {
                Failure::Runtime(e.to_string())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Corpus { cmd } => cmd_corpus(cmd),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Scan(args) => cmd_scan(args),
        Cmd::Evade(args) => cmd_evade(args),
        Cmd::Occlude(args) => cmd_occlude(args),
        Cmd::Packeval(args) => cmd_packeval(args),
        Cmd::Run(args) => cmd_run(args),
    }
}

fn gate_synthetic(manifest: &Path, acknowledged: bool) -> Result<(), Failure> {
    if is_marked_synthetic(manifest) || acknowledged {
        Ok(())
    } else {
        Err(Failure::Usage(SAFETY_BANNER.to_string()))
    }
}

fn load_corpus(manifest: &Path) -> Result<Corpus, Failure> {
    let corpus = ingest_manifest(manifest)?;
    if corpus.is_empty() {
        return Err(Failure::Runtime(format!(
            "{}: manifest lists no files",
            manifest.display()
        )));
    }
    Ok(corpus)
}

fn print_corpus_summary(corpus: &Corpus) {
    println!(
        "{} files ({} benign / {} malicious), digest {}",
        corpus.len(),
        corpus.count(Label::Benign),
        corpus.count(Label::Malicious),
        corpus.digest_hex()
    );
}

fn cmd_corpus(cmd: CorpusCmd) -> Result<(), Failure> {
    match cmd {
        CorpusCmd::Ingest { benign, malicious, out } => {
            let corpus = ingest_dirs(&benign, &malicious)?;
            write_manifest(&corpus, &out)?;
            println!("wrote {}", out.display());
            print_corpus_summary(&corpus);
        }
        CorpusCmd::Sample { manifest, n, seed, label, out } => {
            let corpus = load_corpus(&manifest)?;
            let sampled = corpus::sample(&corpus, n, seed, label)?;
            write_manifest(&sampled, &out)?;
            println!("wrote {}", out.display());
            print_corpus_summary(&sampled);
        }
        CorpusCmd::Split { manifest, test_fraction, seed, out } => {
            let corpus = load_corpus(&manifest)?;
            let (train_half, test_half) = corpus::split(&corpus, test_fraction, seed)?;
            let merged = corpus::merge(&train_half, &test_half)?;
            write_manifest(&merged, &out)?;
            println!("wrote {}", out.display());
            println!(
                "train {} / test {} files",
                train_half.len(),
                test_half.len()
            );
            print_corpus_summary(&merged);
        }
        CorpusCmd::Synth { n, seed, out } => {
            let corpus = generate_synthetic_corpus(n, seed, &out)?;
            println!("wrote {} files under {}", corpus.len(), out.display());
            print_corpus_summary(&corpus);
        }
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let corpus = load_corpus(&args.manifest)?;
    let train_entries: Vec<&ManifestEntry> = corpus
        .entries()
        .iter()
        .filter(|e| e.split == corpus::Split::Train)
        .collect();
    if train_entries.is_empty() {
        return Err(Failure::Runtime("manifest has no train-split files".into()));
    }
    let samples: Vec<Result<TrainSample, String>> =
        gauntlet::engine::parallel_map(&train_entries, args.workers, |e| {
            let bin = e.load().map_err(|err| err.to_string())?;
            Ok(TrainSample::from_bytes(
                bin.bytes(),
                e.label == Label::Malicious,
                args.ngram,
                args.buckets,
            ))
        });
    let mut dataset = Vec::with_capacity(samples.len());
    for (entry, s) in train_entries.iter().zip(samples) {
        match s {
            Ok(sample) => dataset.push(sample),
            Err(msg) => {
                return Err(Failure::Runtime(format!("{}: {msg}", entry.path.display())))
            }
        }
    }
    let cfg = TrainConfig {
        n: args.ngram,
        num_buckets: args.buckets,
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        l2: args.l2,
        seed: args.seed,
    };
    let model = train(&dataset, &cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    save_model(&model, &args.out)?;
    let model_digest = hex::encode(sha256_digest(&std::fs::read(&args.out).map_err(
        |e| Failure::Runtime(format!("{}: {e}", args.out.display())),
    )?));
    println!(
        "trained n={} buckets={} epochs={} on {} files",
        cfg.n,
        cfg.num_buckets,
        cfg.epochs,
        dataset.len()
    );
    println!("model {} sha256 {}", args.out.display(), model_digest);

    let test_entries: Vec<&ManifestEntry> = corpus
        .entries()
        .iter()
        .filter(|e| e.split == corpus::Split::Test)
        .collect();
    if test_entries.is_empty() {
        println!("no test split; skipping held-out evaluation");
        return Ok(());
    }
    let handle = DetectorHandle::new("ngram", Box::new(load_model(&args.out)?));
    let outcomes = baseline_eval(&test_entries, &[&handle], args.workers, &mut Ledger::disabled())?;
    let b = &outcomes[0];
    match b.metrics() {
        Ok(m) => println!(
            "held-out accuracy {:.1}% on {} files (tp {:.1}% tn {:.1}%)",
            m.accuracy_pct,
            b.counts.total(),
            m.tp_pct,
            m.tn_pct
        ),
        Err(_) => println!("held-out split is one-class; accuracy not defined"),
    }
    if !b.failures.is_empty() {
        println!("{} files failed to scan", b.failures.len());
    }
    Ok(())
}

fn cmd_scan(args: ScanArgs) -> Result<(), Failure> {
    let detector = args.detector.build()?;
    let mut any_error = false;
    match (&args.file, &args.manifest) {
        (Some(path), None) => {
            let bytes = std::fs::read(path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            let sha = hex::encode(sha256_digest(&bytes));
            match detector.scan(&bytes) {
                Ok(r) => println!("{sha},{},{}", r.score, decision_str(r.decision)),
                Err(e) => {
                    println!("{sha},error,{e}");
                    any_error = true;
                }
            }
        }
        (None, Some(manifest)) => {
            let corpus = load_corpus(manifest)?;
            let entries: Vec<&ManifestEntry> = corpus.entries().iter().collect();
            let results = gauntlet::engine::parallel_map(&entries, args.workers, |e| {
                e.load()
                    .map_err(|err| err.to_string())
                    .and_then(|bin| detector.scan(bin.bytes()).map_err(|err| err.to_string()))
            });
            for (entry, res) in entries.iter().zip(results) {
                let sha = entry.sha256_hex();
                match res {
                    Ok(r) => println!("{sha},{},{}", r.score, decision_str(r.decision)),
                    Err(e) => {
                        println!("{sha},error,{e}");
                        any_error = true;
                    }
                }
            }
        }
        _ => return Err(Failure::Usage("pass exactly one of --file or --manifest".into())),
    }
    if any_error {
        return Err(Failure::Runtime("one or more scans failed".into()));
    }
    Ok(())
}

fn decision_str(d: gauntlet_core::detect::Decision) -> &'static str {
    match d {
        gauntlet_core::detect::Decision::Malicious => "malicious",
        gauntlet_core::detect::Decision::Benign => "benign",
    }
}

fn cmd_evade(args: EvadeArgs) -> Result<(), Failure> {
    gate_synthetic(&args.manifest, args.i_understand_live_malware)?;
    let corpus = load_corpus(&args.manifest)?;
    let mut selected = corpus::sample(
        &corpus,
        corpus.count(Label::Malicious),
        args.seed,
        Some(Label::Malicious),
    )?;
    if let Some(n) = args.sample {
        selected = corpus::sample(&selected, n, args.seed, None)?;
    }
    let entries: Vec<&ManifestEntry> = selected.entries().iter().collect();
    if entries.is_empty() {
        return Err(Failure::Runtime("manifest has no malicious files".into()));
    }
    let detector = args.detector.build()?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", args.out.display())))?;
    let mut ledger = Ledger::create(&args.out.join("ledger.jsonl"))?;
    let outcomes = run_benign_mod_experiment(
        &entries,
        &[&detector],
        args.max_steps,
        args.seed,
        args.workers,
        &mut ledger,
    )?;
    ledger.finish()?;

    if args.emit {
        let evaders = args.out.join("evaders");
        for (sha, chain) in &outcomes[0].chains {
            if let Ok(chain) = chain {
                if matches!(chain.status, gauntlet_core::mutate::ChainStatus::Evaded { .. }) {
                    let entry = entries
                        .iter()
                        .find(|e| e.sha256_hex() == *sha)
                        .expect("chain rows come from entries");
                    let bin = entry.load()?;
                    emit_chain_files(&bin, chain, &evaders)?;
                }
            }
        }
    }

    let mut report = EvaluationReport::new(args.seed, &selected.digest_hex(), selected.len() as u64);
    report.set_chains(args.max_steps, &outcomes);
    report.write(&args.out)?;

    let o = &outcomes[0];
    let evaded = o.curve.evaded_by.last().copied().unwrap_or(0);
    println!(
        "{} files: {} already benign, {} evaded within {} steps, {} survived, {} errors",
        o.curve.total(),
        o.curve.already_fn,
        evaded,
        args.max_steps,
        o.curve.survived,
        o.errors.len()
    );
    println!("report written to {}", args.out.display());
    Ok(())
}

fn load_benign_pool(
    manifest: &Path,
    cap: usize,
    seed: u64,
) -> Result<BenignPool, Failure> {
    let corpus = load_corpus(manifest)?;
    let n_benign = corpus.count(Label::Benign);
    if n_benign == 0 {
        return Err(Failure::Runtime(format!(
            "{}: no benign files for the adversarial byte source",
            manifest.display()
        )));
    }
    let picked = corpus::sample(
        &corpus,
        n_benign.min(cap),
        derive_seed(seed, &[b"benign.pool"]),
        Some(Label::Benign),
    )?;
    let mut files = Vec::with_capacity(picked.len());
    for entry in picked.entries() {
        files.push(entry.load()?.into_bytes());
    }
    BenignPool::new(files)
        .ok_or_else(|| Failure::Runtime("benign pool files are all empty".into()))
}

fn cmd_occlude(args: OccludeArgs) -> Result<(), Failure> {
    match (&args.file, &args.manifest) {
        (Some(file), None) => occlude_single(&args, file),
        (None, Some(manifest)) => occlude_batch(&args, manifest),
        _ => Err(Failure::Usage("pass exactly one of --file or --manifest".into())),
    }
}

fn occlude_single(args: &OccludeArgs, file: &Path) -> Result<(), Failure> {
    gate_synthetic(file, args.i_understand_live_malware)?;
    let mode = match args.mode.as_slice() {
        [m] => *m,
        [] => return Err(Failure::Usage("single-file occlusion needs --mode".into())),
        _ => return Err(Failure::Usage("single-file occlusion takes one --mode".into())),
    };
    let bytes = std::fs::read(file)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", file.display())))?;
    if args.beta >= bytes.len() {
        return Err(Failure::Runtime(format!(
            "--beta {} must be smaller than the file ({} bytes)",
            args.beta,
            bytes.len()
        )));
    }
    let sha = hex::encode(sha256_digest(&bytes));
    println!("file: {}", file.display());
    println!("sha256: {sha}");

    let occluded = match mode {
        OcclusionMode::Undirected => {
            let seed = derive_seed(args.seed, &[b"occlusion", mode.name().as_bytes()]);
            let (out, (start, end)) = undirected_occlusion(&bytes, args.beta, seed)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("mode: {} (no detector calls)", mode.name());
            println!("window: [{start}, {end}) len {}", end - start);
            if args.detector.is_set() {
                let detector = args.detector.build()?;
                let pre = detector.scan(&bytes).map_err(|e| Failure::Runtime(e.to_string()))?;
                let post = detector.scan(&out).map_err(|e| Failure::Runtime(e.to_string()))?;
                println!("baseline: {} ({})", pre.score, decision_str(pre.decision));
                println!("post: {} ({})", post.score, decision_str(post.decision));
            }
            out
        }
        OcclusionMode::TargetedRandom | OcclusionMode::TargetedAdversarial => {
            let detector = args.detector.build()?;
            let seed = derive_seed(args.seed, &[b"occlusion", mode.name().as_bytes()]);
            let source = match mode {
                OcclusionMode::TargetedRandom => ByteSource::RandomUniform { seed },
                _ => {
                    let manifest = args.benign_pool.as_ref().ok_or_else(|| {
                        Failure::Usage(
                            "targeted-adversarial needs --benign-pool MANIFEST".into(),
                        )
                    })?;
                    ByteSource::BenignSample {
                        pool: load_benign_pool(manifest, args.pool_cap, args.seed)?,
                        seed,
                    }
                }
            };
            let cfg = OcclusionConfig { beta: args.beta, tie_break: TieBreak::Left, source };
            let attack = targeted_occlusion_attack(&bytes, &detector, &cfg)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("mode: {}", mode.name());
            println!(
                "window: [{}, {}) len {} in {} calls",
                attack.search.start,
                attack.search.end,
                attack.search.end - attack.search.start,
                attack.search.calls
            );
            println!(
                "baseline: {} ({})",
                attack.baseline.score,
                decision_str(attack.baseline.decision)
            );
            println!(
                "post: {} ({})",
                attack.post.score,
                decision_str(attack.post.decision)
            );
            println!("evaded: {}", attack.evaded);
            attack.bytes
        }
    };

    if let Some(out) = &args.out {
        std::fs::write(out, &occluded)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
        println!("occluded file written to {}", out.display());
    }
    Ok(())
}

fn occlude_batch(args: &OccludeArgs, manifest: &Path) -> Result<(), Failure> {
    gate_synthetic(manifest, args.i_understand_live_malware)?;
    let corpus = load_corpus(manifest)?;
    let malicious = corpus::sample(
        &corpus,
        corpus.count(Label::Malicious),
        args.seed,
        Some(Label::Malicious),
    )?;
    let entries: Vec<&ManifestEntry> = malicious.entries().iter().collect();
    if entries.is_empty() {
        return Err(Failure::Runtime("manifest has no malicious files".into()));
    }
    let detector = args.detector.build()?;
    let modes: Vec<OcclusionMode> =
        if args.mode.is_empty() { OcclusionMode::ALL.to_vec() } else { args.mode.clone() };
    let pool = if modes.contains(&OcclusionMode::TargetedAdversarial) {
        let pool_manifest = args.benign_pool.as_deref().unwrap_or(manifest);
        Some(load_benign_pool(pool_manifest, args.pool_cap, args.seed)?)
    } else {
        None
    };
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("occlude-out"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", out_dir.display())))?;
    let mut ledger = Ledger::create(&out_dir.join("ledger.jsonl"))?;
    let occluded_dir = out_dir.join("occluded");
    let results = run_occlusion_experiment(
        &entries,
        &detector,
        &[&detector],
        args.beta,
        &modes,
        pool,
        args.seed,
        args.workers,
        Some(&occluded_dir),
        &mut ledger,
    )?;
    ledger.finish()?;

    let mut report =
        EvaluationReport::new(args.seed, &malicious.digest_hex(), malicious.len() as u64);
    report.occlusion = Some(results.clone());
    report.write(&out_dir)?;

    let base = &results.no_occlusion[&detector.id];
    println!(
        "baseline detection {}/{} before occlusion",
        base.num, base.den
    );
    for (mode, s) in &results.per_mode {
        let det = &s.detection[&detector.id];
        println!(
            "{mode}: {} produced, detection {}/{}, mean window {:.0}, mean calls {:.1}",
            s.produced,
            det.num,
            det.den,
            s.mean_window_len(),
            s.mean_calls()
        );
    }
    println!("report written to {}", out_dir.display());
    Ok(())
}

fn cmd_packeval(args: PackArgs) -> Result<(), Failure> {
    gate_synthetic(&args.manifest, args.i_understand_live_malware)?;
    let corpus = load_corpus(&args.manifest)?;
    let entries: Vec<&ManifestEntry> = corpus.entries().iter().collect();
    let detector = args.detector.build()?;
    let tool =
        ToolTemplate::parse(&args.pack_cmd).map_err(|e| Failure::Usage(e.to_string()))?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", args.out.display())))?;
    let mut ledger = Ledger::create(&args.out.join("ledger.jsonl"))?;
    let outcome = run_packing_experiment(
        &entries,
        &[&detector],
        &tool,
        Duration::from_millis(args.timeout_ms),
        args.workers,
        &args.out.join("packed"),
        &mut ledger,
    )?;
    ledger.finish()?;

    let mut report = EvaluationReport::new(args.seed_for_report(), &corpus.digest_hex(), corpus.len() as u64);
    report.packing = Some(outcome.clone());
    report.write(&args.out)?;

    let q = &outcome.per_detector[&detector.id];
    println!(
        "benign {} | packed benign {} | malware {} | packed malware {}",
        frac(&q.benign),
        frac(&q.packed_benign),
        frac(&q.malware),
        frac(&q.packed_malware)
    );
    if !outcome.pack_failures.is_empty() {
        println!("{} files failed to pack and were excluded", outcome.pack_failures.len());
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

impl PackArgs {
    // packing draws no randomness; the report seed only feeds the run id
    fn seed_for_report(&self) -> u64 {
        0
    }
}

fn frac(f: &gauntlet::engine::Fraction) -> String {
    if f.den == 0 {
        "-".to_string()
    } else {
        format!("{}/{} ({:.1}%)", f.num, f.den, f.pct())
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = args.workers {
        if workers == 0 {
            return Err(Failure::Usage("--workers must be at least 1".into()));
        }
        cfg.workers = workers;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    gate_synthetic(&cfg.corpus.manifest, args.i_understand_live_malware)?;

    let corpus = load_corpus(&cfg.corpus.manifest)?;
    let base_dir = args.config.parent().unwrap_or_else(|| Path::new("."));
    let detectors = cfg.build_detectors(base_dir)?;
    let det_refs: Vec<&DetectorHandle> = detectors.iter().collect();

    // evaluate on the test split when the manifest carries one; attacker
    // material (benign pool) comes from the train split when possible
    let eval_entries: Vec<&ManifestEntry> = {
        let test: Vec<&ManifestEntry> = corpus
            .entries()
            .iter()
            .filter(|e| e.split == corpus::Split::Test)
            .collect();
        if test.is_empty() { corpus.entries().iter().collect() } else { test }
    };
    let eval_corpus = Corpus::from_entries(eval_entries.iter().map(|e| (*e).clone()).collect())?;

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", cfg.out_dir.display())))?;
    let mut ledger = Ledger::create(&cfg.out_dir.join("ledger.jsonl"))?;
    let mut report =
        EvaluationReport::new(cfg.seed, &eval_corpus.digest_hex(), eval_corpus.len() as u64);

    println!(
        "evaluating {} files against {} detector(s), seed {}",
        eval_corpus.len(),
        detectors.len(),
        cfg.seed
    );
    let baselines = baseline_eval(&eval_entries, &det_refs, cfg.workers, &mut ledger)?;
    report.set_baseline(&baselines);
    for b in &baselines {
        match b.metrics() {
            Ok(m) => println!("  {}: accuracy {:.1}%", b.detector, m.accuracy_pct),
            Err(_) => println!("  {}: one-class corpus, accuracy not defined", b.detector),
        }
    }

    for tech in &cfg.techniques {
        run_technique(tech, &cfg, &corpus, &eval_corpus, &det_refs, &mut report, &mut ledger)?;
    }

    let lines = ledger.finish()?;
    let written = report.write(&cfg.out_dir)?;
    println!("{lines} ledger lines");
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_technique(
    tech: &gauntlet::runconfig::TechniqueConfig,
    cfg: &RunConfig,
    corpus: &Corpus,
    eval_corpus: &Corpus,
    detectors: &[&DetectorHandle],
    report: &mut EvaluationReport,
    ledger: &mut Ledger,
) -> Result<(), Failure> {
    let select = |label: Label, sample: Option<usize>| -> Result<Corpus, Failure> {
        let available = eval_corpus.count(label);
        if available == 0 {
            return Err(Failure::Runtime(format!(
                "technique {} needs {label} files in the evaluation set",
                tech.kind.name()
            )));
        }
        let n = sample.map_or(available, |s| s.min(available));
        Ok(corpus::sample(
            eval_corpus,
            n,
            derive_seed(cfg.seed, &[b"technique.sample", tech.kind.name().as_bytes()]),
            Some(label),
        )?)
    };
    match tech.kind {
        TechniqueKind::BenignChain => {
            let selected = select(Label::Malicious, tech.sample)?;
            let entries: Vec<&ManifestEntry> = selected.entries().iter().collect();
            let max_steps = tech.max_steps.unwrap_or(10);
            println!("chains: {} malicious files, max {} steps", entries.len(), max_steps);
            let outcomes = run_benign_mod_experiment(
                &entries,
                detectors,
                max_steps,
                cfg.seed,
                cfg.workers,
                ledger,
            )?;
            if tech.emit.unwrap_or(false) {
                let evaders = cfg.out_dir.join("evaders");
                for outcome in &outcomes {
                    for (sha, chain) in &outcome.chains {
                        if let Ok(chain) = chain {
                            if matches!(
                                chain.status,
                                gauntlet_core::mutate::ChainStatus::Evaded { .. }
                            ) {
                                let entry = entries
                                    .iter()
                                    .find(|e| e.sha256_hex() == *sha)
                                    .expect("chain rows come from entries");
                                emit_chain_files(&entry.load()?, chain, &evaders)?;
                            }
                        }
                    }
                }
            }
            for o in &outcomes {
                let evaded = o.curve.evaded_by.last().copied().unwrap_or(0);
                println!(
                    "  {}: {} evaded, {} survived, {} already benign",
                    o.detector, evaded, o.curve.survived, o.curve.already_fn
                );
            }
            report.set_chains(max_steps, &outcomes);
        }
        TechniqueKind::Occlusion => {
            let selected = select(Label::Malicious, tech.sample)?;
            let entries: Vec<&ManifestEntry> = selected.entries().iter().collect();
            let modes = tech.occlusion_modes();
            let search = match &tech.search_detector {
                Some(id) => detectors
                    .iter()
                    .find(|d| d.id == *id)
                    .copied()
                    .expect("validated against detector ids"),
                None => detectors[0],
            };
            let pool = if modes.contains(&OcclusionMode::TargetedAdversarial) {
                // prefer train-split benign bytes so the attacker never
                // touches evaluation files
                let train_benign: Vec<&ManifestEntry> = corpus
                    .entries()
                    .iter()
                    .filter(|e| {
                        e.label == Label::Benign && e.split == corpus::Split::Train
                    })
                    .collect();
                let candidates: Vec<&ManifestEntry> = if train_benign.is_empty() {
                    eval_corpus
                        .entries()
                        .iter()
                        .filter(|e| e.label == Label::Benign)
                        .collect()
                } else {
                    train_benign
                };
                if candidates.is_empty() {
                    return Err(Failure::Runtime(
                        "adversarial occlusion needs benign files in the corpus".into(),
                    ));
                }
                let cap = tech.benign_pool.unwrap_or(32).max(1);
                let picked = corpus::sample(
                    &Corpus::from_entries(
                        candidates.iter().map(|e| (*e).clone()).collect(),
                    )?,
                    cap.min(candidates.len()),
                    derive_seed(cfg.seed, &[b"benign.pool"]),
                    Some(Label::Benign),
                )?;
                let mut files = Vec::with_capacity(picked.len());
                for entry in picked.entries() {
                    files.push(entry.load()?.into_bytes());
                }
                Some(BenignPool::new(files).ok_or_else(|| {
                    Failure::Runtime("benign pool files are all empty".into())
                })?)
            } else {
                None
            };
            let beta = tech.beta.unwrap_or(2048);
            println!(
                "occlusion: {} malicious files, beta {}, search {}",
                entries.len(),
                beta,
                search.id
            );
            let emit_dir = tech
                .emit
                .unwrap_or(false)
                .then(|| cfg.out_dir.join("occluded"));
            let results = run_occlusion_experiment(
                &entries,
                search,
                detectors,
                beta,
                &modes,
                pool,
                cfg.seed,
                cfg.workers,
                emit_dir.as_deref(),
                ledger,
            )?;
            for (mode, s) in &results.per_mode {
                let det = &s.detection[&search.id];
                println!(
                    "  {mode}: {} produced, {} detected by {}",
                    s.produced, det.num, search.id
                );
            }
            report.occlusion = Some(results);
        }
        TechniqueKind::Pack => {
            let sample_cap = tech.sample;
            let benign = select(Label::Benign, sample_cap)?;
            let malicious = select(Label::Malicious, sample_cap)?;
            let merged = corpus::merge(&benign, &malicious)?;
            let entries: Vec<&ManifestEntry> = merged.entries().iter().collect();
            let tool = ToolTemplate::parse(tech.command.as_ref().expect("validated"))
                .expect("validated at load");
            println!("packing: {} files via {}", entries.len(), tool.program());
            let outcome = run_packing_experiment(
                &entries,
                detectors,
                &tool,
                tech.tool_timeout(),
                cfg.workers,
                &cfg.out_dir.join("packed"),
                ledger,
            )?;
            for (det, q) in &outcome.per_detector {
                println!(
                    "  {det}: benign {} | packed benign {} | malware {} | packed malware {}",
                    frac(&q.benign),
                    frac(&q.packed_benign),
                    frac(&q.malware),
                    frac(&q.packed_malware)
                );
            }
            report.packing = Some(outcome);
        }
        TechniqueKind::ExternalMutator => {
            let selected = select(Label::Benign, tech.sample)?;
            let entries: Vec<&ManifestEntry> = selected.entries().iter().collect();
            let tool = ToolTemplate::parse(tech.command.as_ref().expect("validated"))
                .expect("validated at load");
            println!(
                "external mutator: {} benign files via {}",
                entries.len(),
                tool.program()
            );
            let outcome = run_external_mutator_experiment(
                &entries,
                detectors,
                &tool,
                tech.tool_timeout(),
                cfg.workers,
                &cfg.out_dir.join("mutated"),
                ledger,
            )?;
            for (det, row) in &outcome.per_detector {
                println!(
                    "  {det}: benign acc {} | detected after {} | lift {:+.1}",
                    frac(&row.pre_benign),
                    frac(&row.post_detect),
                    row.lift
                );
            }
            report.external_mutator = Some(outcome);
        }
    }
    Ok(())
}

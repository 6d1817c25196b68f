//! Reference scanner adapter speaking the line protocol on stdio.
//!
//! Emits `READY`, then answers `SCAN <path>` requests until `QUIT` or EOF.
//! Flags select the reply so conformance tests can exercise every branch;
//! `--ngram-model` turns it into a real scanner.

use std::io::BufRead;
use std::path::PathBuf;

use clap::Parser;
use gauntlet::model_io::load_model;
use gauntlet_core::ngram::NGramModel;

#[derive(Parser)]
#[command(name = "reference-adapter", disable_help_flag = false)]
struct Args {
    /// Reply `SCORE <value>` to every scan.
    #[arg(long, conflicts_with_all = ["decision", "error", "bad_score", "ngram_model"])]
    score: Option<f64>,

    /// Reply `DECISION MALICIOUS` or `DECISION BENIGN` to every scan.
    #[arg(long, value_parser = ["malicious", "benign"], conflicts_with_all = ["error", "bad_score", "ngram_model"])]
    decision: Option<String>,

    /// Reply `ERROR <message>` to every scan.
    #[arg(long, conflicts_with_all = ["bad_score", "ngram_model"])]
    error: Option<String>,

    /// Reply with an out-of-range score.
    #[arg(long)]
    bad_score: bool,

    /// Score files with a model instead of a canned reply.
    #[arg(long)]
    ngram_model: Option<PathBuf>,

    /// Sleep this long before every reply.
    #[arg(long, default_value_t = 0)]
    sleep_ms: u64,

    /// Exit abruptly after this many successful scans.
    #[arg(long)]
    crash_after: Option<u64>,

    /// Never announce readiness (startup-timeout testing).
    #[arg(long)]
    no_ready: bool,
}

fn main() {
    let args = Args::parse();
    let model: Option<NGramModel> = args.ngram_model.as_ref().map(|path| {
        load_model(path).unwrap_or_else(|e| {
            eprintln!("reference-adapter: {e}");
            std::process::exit(1);
        })
    });

    if args.no_ready {
        // hold the pipe open without ever becoming ready
        std::thread::sleep(std::time::Duration::from_secs(3600));
        return;
    }
    println!("READY");

    let stdin = std::io::stdin();
    let mut scans = 0u64;
    for line in stdin.lock().lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        let line = line.trim();
        if line == "QUIT" {
            std::process::exit(0);
        }
        let Some(path) = line.strip_prefix("SCAN ") else {
            println!("ERROR unrecognized request");
            continue;
        };
        if args.sleep_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(args.sleep_ms));
        }
        if let Some(limit) = args.crash_after {
            if scans >= limit {
                std::process::exit(3);
            }
        }
        scans += 1;
        if args.bad_score {
            println!("SCORE 2.5");
        } else if let Some(msg) = &args.error {
            println!("ERROR {msg}");
        } else if let Some(d) = &args.decision {
            println!("DECISION {}", d.to_uppercase());
        } else if let Some(model) = &model {
            match std::fs::read(path) {
                Ok(bytes) => println!("SCORE {}", model.predict(&bytes)),
                Err(e) => println!("ERROR {e}"),
            }
        } else {
            println!("SCORE {}", args.score.unwrap_or(0.0));
        }
    }
}

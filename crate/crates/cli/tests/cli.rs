//! Command-line behavior: exit codes, the synthetic-corpus safety gate, and
//! output formats, exercised through the real binaries.

use std::path::Path;
use std::process::{Command, Output};

fn gauntlet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gauntlet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn gauntlet")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process terminated by signal")
}

/// Synthesize a marked corpus and train a model next to it.
fn corpus_with_model(dir: &Path) {
    let synth = gauntlet(dir, &["corpus", "synth", "--n", "20", "--seed", "5", "--out", "corpus"]);
    assert!(synth.status.success(), "{}", stderr_of(&synth));
    let train = gauntlet(
        dir,
        &[
            "train",
            "--manifest",
            "corpus/manifest.csv",
            "--out",
            "model.bin",
            "--seed",
            "3",
            "--buckets",
            "65536",
        ],
    );
    assert!(train.status.success(), "{}", stderr_of(&train));
}

#[test]
fn version_names_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let out = gauntlet(dir.path(), &["--version"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout_of(&out);
    assert!(text.contains("model format v"), "{text}");
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["corpus", "--help"], &["occlude", "--help"]] {
        let out = gauntlet(dir.path(), args);
        assert_eq!(exit_code(&out), 0);
    }
}

#[test]
fn synth_writes_two_files_per_class_and_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let out = gauntlet(dir.path(), &["corpus", "synth", "--n", "500", "--seed", "7", "--out", "c"]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    let bins = std::fs::read_dir(dir.path().join("c"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "bin"))
        .count();
    assert_eq!(bins, 1000);
    assert!(dir.path().join("c/manifest.csv").exists());
    assert!(dir.path().join("c/.synthetic").exists());
}

#[test]
fn missing_input_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = gauntlet(
        dir.path(),
        &["corpus", "ingest", "--benign", "nope", "--malicious", "nope", "--out", "m.csv"],
    );
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_of(&out).contains("does not exist"));
}

#[test]
fn sampling_beyond_the_pool_fails() {
    let dir = tempfile::tempdir().unwrap();
    let synth = gauntlet(dir.path(), &["corpus", "synth", "--n", "5", "--seed", "1", "--out", "c"]);
    assert!(synth.status.success());
    let out = gauntlet(
        dir.path(),
        &["corpus", "sample", "--manifest", "c/manifest.csv", "--n", "999", "--seed", "1", "--out", "s.csv"],
    );
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_of(&out).contains("only"), "{}", stderr_of(&out));
}

#[test]
fn training_on_one_class_fails() {
    let dir = tempfile::tempdir().unwrap();
    let synth = gauntlet(dir.path(), &["corpus", "synth", "--n", "10", "--seed", "2", "--out", "c"]);
    assert!(synth.status.success());
    let manifest = std::fs::read_to_string(dir.path().join("c/manifest.csv")).unwrap();
    let benign_only: String = manifest
        .lines()
        .filter(|l| l.starts_with("path,") || l.contains(",benign,"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(dir.path().join("c/benign.csv"), benign_only).unwrap();
    let out = gauntlet(
        dir.path(),
        &["train", "--manifest", "c/benign.csv", "--out", "m.bin", "--seed", "1"],
    );
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_of(&out).contains("class"), "{}", stderr_of(&out));
}

#[test]
fn train_requires_an_existing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = gauntlet(dir.path(), &["train", "--manifest", "nope.csv", "--out", "m.bin", "--seed", "1"]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn scan_emits_one_csv_line_per_file() {
    let dir = tempfile::tempdir().unwrap();
    corpus_with_model(dir.path());
    let out = gauntlet(
        dir.path(),
        &["scan", "--model", "model.bin", "--manifest", "corpus/manifest.csv"],
    );
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 40);
    for line in lines {
        let mut parts = line.splitn(3, ',');
        let sha = parts.next().unwrap();
        let score = parts.next().unwrap();
        let decision = parts.next().unwrap();
        assert_eq!(sha.len(), 64);
        assert!(sha.bytes().all(|b| b.is_ascii_hexdigit()));
        assert!(score.parse::<f64>().is_ok(), "unparseable score in {line:?}");
        assert!(decision == "malicious" || decision == "benign", "{line:?}");
    }
}

#[test]
fn scan_reports_empty_manifests() {
    let dir = tempfile::tempdir().unwrap();
    corpus_with_model(dir.path());
    std::fs::write(dir.path().join("empty.csv"), "path,label,sha256,size,split\n").unwrap();
    let out = gauntlet(dir.path(), &["scan", "--model", "model.bin", "--manifest", "empty.csv"]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_of(&out).contains("no files"), "{}", stderr_of(&out));
}

#[test]
fn scan_surfaces_adapter_timeouts() {
    let dir = tempfile::tempdir().unwrap();
    corpus_with_model(dir.path());
    let adapter = format!("{} --sleep-ms 5000", env!("CARGO_BIN_EXE_reference-adapter"));
    let out = gauntlet(
        dir.path(),
        &[
            "scan",
            "--adapter",
            &adapter,
            "--scan-timeout-ms",
            "200",
            "--file",
            "corpus/malicious-00000.bin",
        ],
    );
    assert_eq!(exit_code(&out), 1);
    assert!(stdout_of(&out).contains(",error,"), "{}", stdout_of(&out));
}

#[test]
fn unmarked_corpora_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    corpus_with_model(dir.path());

    // same files, no marker
    let live = dir.path().join("live");
    std::fs::create_dir(&live).unwrap();
    for entry in std::fs::read_dir(dir.path().join("corpus")).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().is_some_and(|n| n != ".synthetic") {
            std::fs::copy(&path, live.join(path.file_name().unwrap())).unwrap();
        }
    }

    let evade = gauntlet(
        dir.path(),
        &["evade", "--manifest", "live/manifest.csv", "--model", "model.bin", "--seed", "1", "--out", "e"],
    );
    assert_eq!(exit_code(&evade), 2);
    assert!(stderr_of(&evade).contains("refusing"), "{}", stderr_of(&evade));

    let occlude = gauntlet(
        dir.path(),
        &["occlude", "--manifest", "live/manifest.csv", "--model", "model.bin", "--beta", "512", "--seed", "1", "--out", "o"],
    );
    assert_eq!(exit_code(&occlude), 2);

    let acknowledged = gauntlet(
        dir.path(),
        &[
            "evade",
            "--manifest",
            "live/manifest.csv",
            "--model",
            "model.bin",
            "--seed",
            "1",
            "--out",
            "e",
            "--i-understand-live-malware",
        ],
    );
    assert_eq!(exit_code(&acknowledged), 0, "{}", stderr_of(&acknowledged));
}

#[test]
fn occlude_requires_beta_smaller_than_the_file() {
    let dir = tempfile::tempdir().unwrap();
    corpus_with_model(dir.path());
    let file = dir.path().join("corpus/malicious-00000.bin");
    let size = std::fs::metadata(&file).unwrap().len().to_string();
    let out = gauntlet(
        dir.path(),
        &["occlude", "--file", "corpus/malicious-00000.bin", "--mode", "undirected", "--beta", &size, "--seed", "1"],
    );
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_of(&out).contains("smaller than the file"), "{}", stderr_of(&out));
}

#[test]
fn undirected_occlusion_runs_without_a_detector() {
    let dir = tempfile::tempdir().unwrap();
    corpus_with_model(dir.path());
    let out = gauntlet(
        dir.path(),
        &["occlude", "--file", "corpus/malicious-00000.bin", "--mode", "undirected", "--beta", "512", "--seed", "1"],
    );
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    assert!(stdout_of(&out).contains("no detector calls"), "{}", stdout_of(&out));
}

#[test]
fn run_rejects_unknown_config_fields_with_the_field_name() {
    let dir = tempfile::tempdir().unwrap();
    corpus_with_model(dir.path());
    std::fs::write(
        dir.path().join("bad.toml"),
        "seed = 1\nbogus_field = 2\n[corpus]\nmanifest = \"corpus/manifest.csv\"\n\
         [[detector]]\nid = \"d\"\nkind = \"ngram\"\nmodel = \"model.bin\"\n",
    )
    .unwrap();
    let out = gauntlet(dir.path(), &["run", "--config", "bad.toml"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("bogus_field"), "{}", stderr_of(&out));
}

#[test]
fn run_rejects_unknown_search_detectors() {
    let dir = tempfile::tempdir().unwrap();
    corpus_with_model(dir.path());
    std::fs::write(
        dir.path().join("bad.toml"),
        "seed = 1\n[corpus]\nmanifest = \"corpus/manifest.csv\"\n\
         [[detector]]\nid = \"d\"\nkind = \"ngram\"\nmodel = \"model.bin\"\n\
         [[technique]]\nkind = \"occlusion\"\nsearch_detector = \"ghost\"\n",
    )
    .unwrap();
    let out = gauntlet(dir.path(), &["run", "--config", "bad.toml"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("search_detector"), "{}", stderr_of(&out));
}

#[test]
fn packeval_requires_a_reachable_packer() {
    let dir = tempfile::tempdir().unwrap();
    corpus_with_model(dir.path());
    let out = gauntlet(
        dir.path(),
        &[
            "packeval",
            "--manifest",
            "corpus/manifest.csv",
            "--model",
            "model.bin",
            "--pack-cmd",
            "/definitely/not/here {in} {out}",
            "--out",
            "p",
        ],
    );
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_of(&out).contains("not found"), "{}", stderr_of(&out));
}

#[test]
fn evade_writes_curves_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    corpus_with_model(dir.path());
    let out = gauntlet(
        dir.path(),
        &["evade", "--manifest", "corpus/manifest.csv", "--model", "model.bin", "--seed", "11", "--max-steps", "4", "--out", "e"],
    );
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    for artifact in ["e/report.json", "e/report.md", "e/curves.csv", "e/ledger.jsonl"] {
        assert!(dir.path().join(artifact).exists(), "{artifact} missing");
    }
    let curves = std::fs::read_to_string(dir.path().join("e/curves.csv")).unwrap();
    assert!(curves.starts_with("detector,k,evaded_by\n"));
    // header plus one row per step budget 0..=4
    assert_eq!(curves.lines().count(), 6);
}

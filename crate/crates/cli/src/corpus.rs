//! Corpora: labeled, hashed, deduplicated file collections plus the
//! synthetic generator used for tests and demos.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gauntlet_core::pe::{sha256_digest, Label, RawBinary};
use gauntlet_core::seed::{derive_seed, rng_from_seed};
use gauntlet_core::synth::{build_pe, Filler, SynthSpec, MALICIOUS_MOTIF};
use rand::seq::index::sample as index_sample;
use rand::seq::SliceRandom;

pub const MANIFEST_COLUMNS: [&str; 5] = ["path", "label", "sha256", "size", "split"];

/// Marker file that flags a corpus directory as generated, not live.
pub const SYNTHETIC_MARKER: &str = ".synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub sha256: [u8; 32],
    pub size: u64,
    pub split: Split,
}

impl ManifestEntry {
    pub fn sha256_hex(&self) -> String {
        hex::encode(self.sha256)
    }

    /// Read the file and verify it still matches its recorded hash.
    pub fn load(&self) -> Result<RawBinary, CorpusError> {
        let bytes = fs::read(&self.path)
            .map_err(|e| CorpusError::Io { path: self.path.clone(), source: e })?;
        if sha256_digest(&bytes) != self.sha256 {
            return Err(CorpusError::HashMismatch { path: self.path.clone() });
        }
        let origin = self.path.to_string_lossy().into_owned();
        RawBinary::new(bytes, self.label, origin)
            .map_err(|_| CorpusError::EmptyFile { path: self.path.clone() })
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    entries: Vec<ManifestEntry>,
    digest: [u8; 32],
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus root does not exist: {0}")]
    MissingRoot(PathBuf),
    #[error("{count} file(s) appear under both labels, first: {first}")]
    LabelConflict { count: usize, first: String },
    #[error("requested {requested} files but only {available} match")]
    NotEnoughFiles { requested: usize, available: usize },
    #[error("test fraction must lie in [0, 1], got {0}")]
    DegenerateFraction(f64),
    #[error("manifest {path}: line {line}: {message}")]
    Manifest { path: PathBuf, line: u64, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: content no longer matches its manifest hash")]
    HashMismatch { path: PathBuf },
    #[error("{path}: file is empty")]
    EmptyFile { path: PathBuf },
    #[error("path is not valid UTF-8: {0}")]
    NonUtf8Path(PathBuf),
}

impl Corpus {
    /// Deduplicate by hash, reject cross-label conflicts, compute the
    /// digest. Entry order is normalized to (label, sha) for determinism.
    pub fn from_entries(mut entries: Vec<ManifestEntry>) -> Result<Self, CorpusError> {
        entries.sort_by(|a, b| (a.label, a.sha256).cmp(&(b.label, b.sha256)));
        let mut by_hash: BTreeMap<[u8; 32], Label> = BTreeMap::new();
        let mut conflicts: Vec<String> = Vec::new();
        let mut kept = Vec::with_capacity(entries.len());
        for e in entries {
            match by_hash.get(&e.sha256) {
                None => {
                    by_hash.insert(e.sha256, e.label);
                    kept.push(e);
                }
                Some(&label) if label == e.label => {} // duplicate content, keep first
                Some(_) => conflicts.push(e.sha256_hex()),
            }
        }
        if !conflicts.is_empty() {
            return Err(CorpusError::LabelConflict {
                count: conflicts.len(),
                first: conflicts[0].clone(),
            });
        }
        let digest = digest_of(&kept);
        Ok(Corpus { entries: kept, digest })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn with_label(&self, label: Label) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.label == label).collect()
    }

    pub fn with_split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

fn digest_of(entries: &[ManifestEntry]) -> [u8; 32] {
    let mut lines: Vec<String> = entries
        .iter()
        .map(|e| format!("{}:{}", e.sha256_hex(), e.label))
        .collect();
    lines.sort();
    sha256_digest(lines.join("\n").as_bytes())
}

/// Walk `benign/` and `malicious/` style roots, hash every regular file.
pub fn ingest_dirs(benign: &Path, malicious: &Path) -> Result<Corpus, CorpusError> {
    let mut entries = Vec::new();
    for (root, label) in [(benign, Label::Benign), (malicious, Label::Malicious)] {
        if !root.is_dir() {
            return Err(CorpusError::MissingRoot(root.to_path_buf()));
        }
        let mut walker: Vec<_> = walkdir::WalkDir::new(root)
            .sort_by_file_name()
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .collect();
        walker.sort();
        for path in walker {
            let bytes =
                fs::read(&path).map_err(|e| CorpusError::Io { path: path.clone(), source: e })?;
            entries.push(ManifestEntry {
                sha256: sha256_digest(&bytes),
                size: bytes.len() as u64,
                label,
                split: Split::Train,
                path,
            });
        }
    }
    Corpus::from_entries(entries)
}

/// Load a manifest CSV. The column set is fixed; anything else is a
/// structural error, not a warning. Relative paths resolve against the
/// manifest's directory.
pub fn ingest_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| manifest_err(path, 0, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| manifest_err(path, 1, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != MANIFEST_COLUMNS {
        return Err(manifest_err(
            path,
            1,
            format!(
                "columns must be exactly {:?}, found {:?}",
                MANIFEST_COLUMNS,
                headers.iter().collect::<Vec<_>>()
            ),
        ));
    }
    let mut entries = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| manifest_err(path, line, e.to_string()))?;
        let raw_path = PathBuf::from(&row[0]);
        let resolved = if raw_path.is_absolute() { raw_path } else { base.join(raw_path) };
        if !resolved.is_file() {
            return Err(manifest_err(
                path,
                line,
                format!("listed file does not exist: {}", resolved.display()),
            ));
        }
        let label = match &row[1] {
            "benign" => Label::Benign,
            "malicious" => Label::Malicious,
            other => return Err(manifest_err(path, line, format!("unknown label {other:?}"))),
        };
        let mut sha256 = [0u8; 32];
        hex::decode_to_slice(&row[2], &mut sha256)
            .map_err(|e| manifest_err(path, line, format!("bad sha256: {e}")))?;
        let size: u64 = row[3]
            .parse()
            .map_err(|e| manifest_err(path, line, format!("bad size: {e}")))?;
        let split = match &row[4] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(manifest_err(path, line, format!("unknown split {other:?}"))),
        };
        entries.push(ManifestEntry { path: resolved, label, sha256, size, split });
    }
    Corpus::from_entries(entries)
}

fn manifest_err(path: &Path, line: u64, message: String) -> CorpusError {
    CorpusError::Manifest { path: path.to_path_buf(), line, message }
}

/// Write a manifest. Paths are stored relative to the manifest's own
/// directory when the file sits under it, absolute otherwise, so the
/// manifest stays valid from any working directory.
pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| manifest_err(path, 0, e.to_string()))?;
    w.write_record(MANIFEST_COLUMNS).map_err(|e| manifest_err(path, 0, e.to_string()))?;
    for e in corpus.entries() {
        let stored: PathBuf = match parent.and_then(|dir| e.path.strip_prefix(dir).ok()) {
            Some(rel) => rel.to_path_buf(),
            None if e.path.is_absolute() => e.path.clone(),
            None => std::env::current_dir()
                .map_err(|err| CorpusError::Io { path: e.path.clone(), source: err })?
                .join(&e.path),
        };
        let p = stored
            .to_str()
            .ok_or_else(|| CorpusError::NonUtf8Path(e.path.clone()))?
            .to_string();
        let p = p.as_str();
        w.write_record([
            p,
            &e.label.to_string(),
            &e.sha256_hex(),
            &e.size.to_string(),
            &e.split.to_string(),
        ])
        .map_err(|err| manifest_err(path, 0, err.to_string()))?;
    }
    w.flush().map_err(|e| CorpusError::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

/// Uniform sample without replacement. Stable order, deterministic seed.
pub fn sample(
    corpus: &Corpus,
    n: usize,
    seed: u64,
    label: Option<Label>,
) -> Result<Corpus, CorpusError> {
    let pool: Vec<&ManifestEntry> = corpus
        .entries()
        .iter()
        .filter(|e| label.map_or(true, |l| e.label == l))
        .collect();
    if n > pool.len() {
        return Err(CorpusError::NotEnoughFiles { requested: n, available: pool.len() });
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[b"corpus.sample"]));
    let mut picked: Vec<usize> = index_sample(&mut rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    Corpus::from_entries(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Stratified train/test split: each label's test share is within one
/// file of the requested fraction.
pub fn split(
    corpus: &Corpus,
    test_fraction: f64,
    seed: u64,
) -> Result<(Corpus, Corpus), CorpusError> {
    if !(0.0..=1.0).contains(&test_fraction) || test_fraction.is_nan() {
        return Err(CorpusError::DegenerateFraction(test_fraction));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [Label::Benign, Label::Malicious] {
        let group: Vec<&ManifestEntry> =
            corpus.entries().iter().filter(|e| e.label == label).collect();
        let n_test = (group.len() as f64 * test_fraction).round() as usize;
        let mut order: Vec<usize> = (0..group.len()).collect();
        let mut rng =
            rng_from_seed(derive_seed(seed, &[b"corpus.split", label.to_string().as_bytes()]));
        order.shuffle(&mut rng);
        for (rank, idx) in order.into_iter().enumerate() {
            let mut e = group[idx].clone();
            if rank < n_test {
                e.split = Split::Test;
                test.push(e);
            } else {
                e.split = Split::Train;
                train.push(e);
            }
        }
    }
    Ok((Corpus::from_entries(train)?, Corpus::from_entries(test)?))
}

/// Merge two corpora (e.g. the halves of a split) back into one.
pub fn merge(a: &Corpus, b: &Corpus) -> Result<Corpus, CorpusError> {
    let mut entries = a.entries().to_vec();
    entries.extend(b.entries().iter().cloned());
    Corpus::from_entries(entries)
}

/// Generate a balanced synthetic corpus under `out_dir`: valid PE files,
/// where every malicious file carries a fixed 6-byte marker at a random
/// in-section offset and benign files are guaranteed marker-free. Writes
/// the files, `manifest.csv`, and the synthetic marker; returns the
/// corpus with an 80/20 train/test split already assigned.
pub fn generate_synthetic_corpus(
    n_per_class: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Corpus, CorpusError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CorpusError::Io { path: out_dir.to_path_buf(), source: e })?;
    let mut entries = Vec::with_capacity(n_per_class * 2);
    for label in [Label::Benign, Label::Malicious] {
        for i in 0..n_per_class {
            let bytes = synthesize_one(label, seed, i as u64);
            let name = format!("{}-{i:05}.bin", label);
            let path = out_dir.join(name);
            fs::write(&path, &bytes)
                .map_err(|e| CorpusError::Io { path: path.clone(), source: e })?;
            entries.push(ManifestEntry {
                sha256: sha256_digest(&bytes),
                size: bytes.len() as u64,
                label,
                split: Split::Train,
                path,
            });
        }
    }
    let corpus = Corpus::from_entries(entries)?;
    let (train, test) = split(&corpus, 0.2, derive_seed(seed, &[b"corpus.synth.split"]))?;
    let corpus = merge(&train, &test)?;
    write_manifest(&corpus, &out_dir.join("manifest.csv"))?;
    mark_synthetic(out_dir, &corpus)?;
    Ok(corpus)
}

fn synthesize_one(label: Label, master_seed: u64, index: u64) -> Vec<u8> {
    // a benign draw containing the marker by accident is astronomically
    // unlikely, but the guarantee is absolute, so retry on a fresh seed
    for attempt in 0u64.. {
        let file_seed = derive_seed(
            master_seed,
            &[b"corpus.synth", label.to_string().as_bytes(), &index.to_le_bytes(), &attempt.to_le_bytes()],
        );
        let mut spec = SynthSpec::sampled(file_seed);
        // each class writes its payloads in its own token dialect, so a
        // content model can separate them; malicious files also carry the
        // fixed motif for signature-style detectors
        spec.filler = match label {
            Label::Malicious => Filler::Dialect(1),
            _ => Filler::Dialect(0),
        };
        if label == Label::Malicious {
            spec.embed = Some(MALICIOUS_MOTIF.to_vec());
        }
        let bytes = build_pe(&spec).bytes;
        let has_motif = bytes.windows(MALICIOUS_MOTIF.len()).any(|w| w == MALICIOUS_MOTIF);
        if has_motif == (label == Label::Malicious) {
            return bytes;
        }
    }
    unreachable!("seed space exhausted");
}

/// Flag a corpus directory as synthetic so the safety gate lets it pass.
pub fn mark_synthetic(dir: &Path, corpus: &Corpus) -> Result<(), CorpusError> {
    let path = dir.join(SYNTHETIC_MARKER);
    let mut f = fs::File::create(&path)
        .map_err(|e| CorpusError::Io { path: path.clone(), source: e })?;
    writeln!(f, "generated corpus; digest at creation: {}", corpus.digest_hex())
        .map_err(|e| CorpusError::Io { path, source: e })?;
    Ok(())
}

/// A manifest counts as synthetic when the marker file sits beside it.
pub fn is_marked_synthetic(manifest: &Path) -> bool {
    manifest
        .parent()
        .map(|d| d.join(SYNTHETIC_MARKER).is_file())
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn synthetic_corpus_is_balanced_deterministic_and_marked() {
        let d1 = tmp();
        let d2 = tmp();
        let c1 = generate_synthetic_corpus(8, 7, d1.path()).unwrap();
        let c2 = generate_synthetic_corpus(8, 7, d2.path()).unwrap();
        assert_eq!(c1.len(), 16);
        assert_eq!(c1.count(Label::Benign), 8);
        assert_eq!(c1.count(Label::Malicious), 8);
        assert_eq!(c1.digest(), c2.digest(), "same seed, same content");
        assert!(is_marked_synthetic(&d1.path().join("manifest.csv")));
        // 80/20 split, stratified
        assert_eq!(c1.with_split(Split::Test).len(), 4);
        for e in c1.entries() {
            let bin = e.load().unwrap();
            let has = bin
                .bytes()
                .windows(MALICIOUS_MOTIF.len())
                .any(|w| w == MALICIOUS_MOTIF);
            assert_eq!(has, e.label == Label::Malicious, "{}", e.path.display());
        }
    }

    #[test]
    fn manifest_round_trips_and_redigests_identically() {
        let d = tmp();
        let c = generate_synthetic_corpus(4, 3, d.path()).unwrap();
        let re = ingest_manifest(&d.path().join("manifest.csv")).unwrap();
        assert_eq!(re.digest(), c.digest());
        assert_eq!(re.len(), c.len());
    }

    #[test]
    fn manifest_with_wrong_columns_is_rejected() {
        let d = tmp();
        let p = d.path().join("bad.csv");
        fs::write(&p, "path,label,sha256,size,split,extra\n").unwrap();
        let err = ingest_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("columns"), "{err}");
    }

    #[test]
    fn cross_label_duplicates_are_a_conflict() {
        let d = tmp();
        let benign = d.path().join("b");
        let malicious = d.path().join("m");
        fs::create_dir_all(&benign).unwrap();
        fs::create_dir_all(&malicious).unwrap();
        fs::write(benign.join("x.bin"), b"same bytes").unwrap();
        fs::write(malicious.join("y.bin"), b"same bytes").unwrap();
        fs::write(benign.join("ok.bin"), b"other").unwrap();
        let err = ingest_dirs(&benign, &malicious).unwrap_err();
        assert!(matches!(err, CorpusError::LabelConflict { count: 1, .. }), "{err}");
    }

    #[test]
    fn ingest_same_tree_twice_gives_the_same_digest() {
        let d = tmp();
        let benign = d.path().join("b");
        let malicious = d.path().join("m");
        fs::create_dir_all(&benign).unwrap();
        fs::create_dir_all(&malicious).unwrap();
        for i in 0..3 {
            fs::write(benign.join(format!("b{i}")), format!("benign {i}")).unwrap();
            fs::write(malicious.join(format!("m{i}")), format!("mal {i}")).unwrap();
        }
        let c1 = ingest_dirs(&benign, &malicious).unwrap();
        let c2 = ingest_dirs(&benign, &malicious).unwrap();
        assert_eq!(c1.len(), 6);
        assert_eq!(c1.digest(), c2.digest());
    }

    #[test]
    fn sample_is_deterministic_and_bounded() {
        let d = tmp();
        let c = generate_synthetic_corpus(10, 5, d.path()).unwrap();
        let s1 = sample(&c, 6, 11, None).unwrap();
        let s2 = sample(&c, 6, 11, None).unwrap();
        assert_eq!(s1.digest(), s2.digest());
        assert_eq!(s1.len(), 6);
        let all = sample(&c, c.len(), 1, None).unwrap();
        assert_eq!(all.digest(), c.digest(), "full sample is the corpus");
        let err = sample(&c, c.len() + 1, 1, None).unwrap_err();
        assert!(matches!(err, CorpusError::NotEnoughFiles { .. }));
        let only_mal = sample(&c, 5, 2, Some(Label::Malicious)).unwrap();
        assert_eq!(only_mal.count(Label::Malicious), 5);
        assert_eq!(only_mal.count(Label::Benign), 0);
    }

    #[test]
    fn split_is_stratified_disjoint_and_total() {
        let d = tmp();
        let c = generate_synthetic_corpus(10, 9, d.path()).unwrap();
        let (train, test) = split(&c, 0.3, 4).unwrap();
        assert_eq!(train.len() + test.len(), c.len());
        assert_eq!(test.count(Label::Benign), 3);
        assert_eq!(test.count(Label::Malicious), 3);
        for e in test.entries() {
            assert!(!train.entries().iter().any(|t| t.sha256 == e.sha256));
        }
        assert_eq!(merge(&train, &test).unwrap().digest(), c.digest());
        assert!(matches!(
            split(&c, 1.5, 4),
            Err(CorpusError::DegenerateFraction(_))
        ));
    }

    #[test]
    fn load_detects_swapped_content() {
        let d = tmp();
        let c = generate_synthetic_corpus(2, 1, d.path()).unwrap();
        let victim = &c.entries()[0];
        fs::write(&victim.path, b"not the original").unwrap();
        assert!(matches!(victim.load(), Err(CorpusError::HashMismatch { .. })));
    }
}

//! TOML run configuration: corpus, detectors, techniques, and the seed
//! every experiment derives its randomness from.
//!
//! The seed is mandatory so a config file always pins its results.
//! Unknown keys and fields that do not belong to the declared kind are
//! rejected rather than ignored; a typo should fail loudly, not silently
//! change the experiment.

use std::path::{Path, PathBuf};
use std::time::Duration;

use gauntlet_core::detect::DetectorHandle;

use crate::adapter::{AdapterConfig, ExternalDetector};
use crate::engine::OcclusionMode;
use crate::exttool::ToolTemplate;
use crate::model_io::load_model;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("config field {field}: {message}")]
    Field { field: String, message: String },
    #[error(transparent)]
    Model(#[from] crate::model_io::ModelIoError),
    #[error("detector {id}: {cause}")]
    Detector { id: String, cause: gauntlet_core::detect::DetectorError },
    #[error("technique command: {0}")]
    Tool(#[from] crate::exttool::ToolError),
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; all per-file seeds derive from it.
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    #[serde(rename = "detector", default)]
    pub detectors: Vec<DetectorConfig>,
    #[serde(rename = "technique", default)]
    pub techniques: Vec<TechniqueConfig>,
}

fn default_workers() -> usize {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Ngram,
    Adapter,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub id: String,
    pub kind: DetectorKind,
    /// Ngram only: model file.
    pub model: Option<PathBuf>,
    /// Ngram only: decision threshold, default 0.5.
    pub threshold: Option<f64>,
    /// Adapter only: argv of the scanner process.
    pub command: Option<Vec<String>>,
    pub startup_timeout_ms: Option<u64>,
    pub scan_timeout_ms: Option<u64>,
    pub restart_on_error: Option<bool>,
}

impl DetectorConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        let f = |name: &str| format!("detector.{}.{name}", self.id);
        match self.kind {
            DetectorKind::Ngram => {
                if self.model.is_none() {
                    return Err(field_err(&f("model"), "required for kind = \"ngram\""));
                }
                for (set, name) in [
                    (self.command.is_some(), "command"),
                    (self.startup_timeout_ms.is_some(), "startup_timeout_ms"),
                    (self.scan_timeout_ms.is_some(), "scan_timeout_ms"),
                    (self.restart_on_error.is_some(), "restart_on_error"),
                ] {
                    if set {
                        return Err(field_err(&f(name), "only valid for kind = \"adapter\""));
                    }
                }
                if let Some(t) = self.threshold {
                    if !(0.0..=1.0).contains(&t) {
                        return Err(field_err(&f("threshold"), "must lie in [0, 1]"));
                    }
                }
            }
            DetectorKind::Adapter => {
                match &self.command {
                    None => {
                        return Err(field_err(&f("command"), "required for kind = \"adapter\""))
                    }
                    Some(argv) if argv.is_empty() => {
                        return Err(field_err(&f("command"), "must not be empty"))
                    }
                    Some(_) => {}
                }
                for (set, name) in
                    [(self.model.is_some(), "model"), (self.threshold.is_some(), "threshold")]
                {
                    if set {
                        return Err(field_err(&f(name), "only valid for kind = \"ngram\""));
                    }
                }
            }
        }
        Ok(())
    }

    /// Instantiate the configured detector. Ngram models load eagerly;
    /// adapters spawn eagerly so a broken command fails before the run.
    pub fn build(&self, base_dir: &Path) -> Result<DetectorHandle, ConfigError> {
        match self.kind {
            DetectorKind::Ngram => {
                let path = resolve(base_dir, self.model.as_ref().expect("validated"));
                let model = load_model(&path)?;
                let mut handle = DetectorHandle::new(self.id.clone(), Box::new(model));
                if let Some(t) = self.threshold {
                    handle = handle.with_threshold(t);
                }
                Ok(handle)
            }
            DetectorKind::Adapter => {
                let mut cfg = AdapterConfig::new(self.command.clone().expect("validated"));
                if let Some(ms) = self.startup_timeout_ms {
                    cfg.startup_timeout = Duration::from_millis(ms);
                }
                if let Some(ms) = self.scan_timeout_ms {
                    cfg.scan_timeout = Duration::from_millis(ms);
                }
                if let Some(r) = self.restart_on_error {
                    cfg.restart_on_error = r;
                }
                let det = ExternalDetector::connect(cfg)
                    .map_err(|cause| ConfigError::Detector { id: self.id.clone(), cause })?;
                Ok(DetectorHandle::new(self.id.clone(), Box::new(det)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TechniqueKind {
    BenignChain,
    Occlusion,
    Pack,
    ExternalMutator,
}

impl TechniqueKind {
    pub fn name(self) -> &'static str {
        match self {
            TechniqueKind::BenignChain => "benign_chain",
            TechniqueKind::Occlusion => "occlusion",
            TechniqueKind::Pack => "pack",
            TechniqueKind::ExternalMutator => "external_mutator",
        }
    }
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TechniqueConfig {
    pub kind: TechniqueKind,
    /// Cap on files drawn from the relevant class (seeded subsample).
    pub sample: Option<usize>,
    /// Chains only: maximum modifications per file, default 10.
    pub max_steps: Option<u32>,
    /// Occlusion only: window size floor, default 2048.
    pub beta: Option<usize>,
    /// Occlusion only: subset of undirected / targeted_random /
    /// targeted_adversarial, default all three.
    pub modes: Option<Vec<String>>,
    /// Occlusion only: id of the detector driving the search,
    /// default the first configured detector.
    pub search_detector: Option<String>,
    /// Occlusion only: cap on benign files fed to the adversarial source.
    pub benign_pool: Option<usize>,
    /// Pack and external_mutator: command template with {in} and {out}.
    pub command: Option<String>,
    pub timeout_ms: Option<u64>,
    /// Write evading or occluded artifacts next to the report.
    pub emit: Option<bool>,
}

impl TechniqueConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        let f = |name: &str| format!("technique.{}.{name}", self.kind.name());
        let forbid = |set: bool, name: &str, valid_for: &str| {
            if set {
                Err(field_err(&f(name), format!("only valid for kind = \"{valid_for}\"")))
            } else {
                Ok(())
            }
        };
        match self.kind {
            TechniqueKind::BenignChain => {
                forbid(self.beta.is_some(), "beta", "occlusion")?;
                forbid(self.modes.is_some(), "modes", "occlusion")?;
                forbid(self.search_detector.is_some(), "search_detector", "occlusion")?;
                forbid(self.benign_pool.is_some(), "benign_pool", "occlusion")?;
                forbid(self.command.is_some(), "command", "pack or external_mutator")?;
                forbid(self.timeout_ms.is_some(), "timeout_ms", "pack or external_mutator")?;
                if self.max_steps == Some(0) {
                    return Err(field_err(&f("max_steps"), "must be at least 1"));
                }
            }
            TechniqueKind::Occlusion => {
                forbid(self.max_steps.is_some(), "max_steps", "benign_chain")?;
                forbid(self.command.is_some(), "command", "pack or external_mutator")?;
                forbid(self.timeout_ms.is_some(), "timeout_ms", "pack or external_mutator")?;
                if let Some(modes) = &self.modes {
                    if modes.is_empty() {
                        return Err(field_err(&f("modes"), "must not be empty"));
                    }
                    for m in modes {
                        m.parse::<OcclusionMode>()
                            .map_err(|e| field_err(&f("modes"), e))?;
                    }
                }
                if self.beta == Some(0) {
                    return Err(field_err(&f("beta"), "must be at least 1"));
                }
            }
            TechniqueKind::Pack | TechniqueKind::ExternalMutator => {
                forbid(self.max_steps.is_some(), "max_steps", "benign_chain")?;
                forbid(self.beta.is_some(), "beta", "occlusion")?;
                forbid(self.modes.is_some(), "modes", "occlusion")?;
                forbid(self.search_detector.is_some(), "search_detector", "occlusion")?;
                forbid(self.benign_pool.is_some(), "benign_pool", "occlusion")?;
                forbid(self.emit.is_some(), "emit", "benign_chain or occlusion")?;
                match &self.command {
                    None => return Err(field_err(&f("command"), "required")),
                    Some(c) => {
                        ToolTemplate::parse(c)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn occlusion_modes(&self) -> Vec<OcclusionMode> {
        match &self.modes {
            None => OcclusionMode::ALL.to_vec(),
            Some(list) => {
                list.iter().map(|m| m.parse().expect("validated at load")).collect()
            }
        }
    }

    pub fn tool_timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms.unwrap_or(60_000))
    }
}

impl RunConfig {
    /// Parse and validate a config file. Relative paths inside the file
    /// resolve against the file's own directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.corpus.manifest = resolve(base, &cfg.corpus.manifest);
        for det in &mut cfg.detectors {
            if let Some(model) = &det.model {
                det.model = Some(resolve(base, model));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(field_err("workers", "must be at least 1"));
        }
        if self.detectors.is_empty() {
            return Err(field_err("detector", "at least one detector is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for det in &self.detectors {
            det.validate()?;
            if !seen.insert(det.id.as_str()) {
                return Err(field_err(
                    &format!("detector.{}", det.id),
                    "duplicate detector id",
                ));
            }
        }
        let mut kinds = std::collections::BTreeSet::new();
        for tech in &self.techniques {
            tech.validate()?;
            if !kinds.insert(tech.kind.name()) {
                return Err(field_err(
                    &format!("technique.{}", tech.kind.name()),
                    "listed twice; each technique may appear once per run",
                ));
            }
            if let Some(search) = &tech.search_detector {
                if !seen.contains(search.as_str()) {
                    return Err(field_err(
                        "technique.occlusion.search_detector",
                        format!("no detector with id {search:?}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn build_detectors(&self, base_dir: &Path) -> Result<Vec<DetectorHandle>, ConfigError> {
        self.detectors.iter().map(|d| d.build(base_dir)).collect()
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn load_str(text: &str) -> Result<RunConfig, ConfigError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut file = std::fs::File::create(&path).unwrap();
        file.write_all(text.as_bytes()).unwrap();
        RunConfig::load(&path)
    }

    const MINIMAL: &str = r#"
seed = 7

[corpus]
manifest = "corpus/manifest.csv"

[[detector]]
id = "ngram"
kind = "ngram"
model = "models/ngram.bin"
"#;

    #[test]
    fn minimal_config_loads_with_defaults() {
        let cfg = load_str(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.out_dir, PathBuf::from("out"));
        assert!(cfg.corpus.manifest.is_absolute(), "resolved against the config dir");
        assert!(cfg.detectors[0].model.as_ref().unwrap().is_absolute());
        assert!(cfg.techniques.is_empty());
    }

    #[test]
    fn missing_seed_is_a_parse_error() {
        let err = load_str(
            r#"
[corpus]
manifest = "m.csv"

[[detector]]
id = "d"
kind = "ngram"
model = "m.bin"
"#,
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load_str(&format!("{MINIMAL}\nsped = 3\n")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
    }

    #[test]
    fn kind_mismatched_fields_are_rejected() {
        let err = load_str(
            r#"
seed = 1

[corpus]
manifest = "m.csv"

[[detector]]
id = "d"
kind = "ngram"
model = "m.bin"
command = ["scanner"]
"#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("detector.d.command"), "{msg}");
    }

    #[test]
    fn adapter_requires_a_command() {
        let err = load_str(
            r#"
seed = 1

[corpus]
manifest = "m.csv"

[[detector]]
id = "av"
kind = "adapter"
"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("detector.av.command"));
    }

    #[test]
    fn techniques_validate_their_fields() {
        let base = r#"
seed = 1

[corpus]
manifest = "m.csv"

[[detector]]
id = "d"
kind = "ngram"
model = "m.bin"
"#;
        let ok = load_str(&format!(
            "{base}
[[technique]]
kind = \"occlusion\"
beta = 512
modes = [\"undirected\", \"targeted-random\"]
"
        ))
        .unwrap();
        assert_eq!(
            ok.techniques[0].occlusion_modes(),
            vec![OcclusionMode::Undirected, OcclusionMode::TargetedRandom]
        );

        let err = load_str(&format!(
            "{base}
[[technique]]
kind = \"benign_chain\"
beta = 512
"
        ))
        .unwrap_err();
        assert!(err.to_string().contains("beta"));

        let err = load_str(&format!(
            "{base}
[[technique]]
kind = \"pack\"
"
        ))
        .unwrap_err();
        assert!(err.to_string().contains("command"));

        let err = load_str(&format!(
            "{base}
[[technique]]
kind = \"pack\"
command = \"upx {{in}}\"
"
        ))
        .unwrap_err();
        assert!(err.to_string().contains("{out}"), "{err}");
    }

    #[test]
    fn duplicate_detector_ids_are_rejected() {
        let err = load_str(
            r#"
seed = 1

[corpus]
manifest = "m.csv"

[[detector]]
id = "d"
kind = "ngram"
model = "a.bin"

[[detector]]
id = "d"
kind = "ngram"
model = "b.bin"
"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn unknown_search_detector_is_rejected() {
        let err = load_str(&format!(
            "{MINIMAL}
[[technique]]
kind = \"occlusion\"
search_detector = \"ghost\"
"
        ))
        .unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }
}

//! External file transformers (packers, injectors) invoked per file via
//! an argv template containing `{in}` and `{out}` placeholders.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToolTemplate {
    argv: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("command template must contain the {0} placeholder")]
    MissingPlaceholder(&'static str),
    #[error("tool not found: {0}")]
    ToolMissing(String),
    #[error("failed to launch {program}: {source}")]
    Launch { program: String, source: std::io::Error },
    #[error("tool exited with {status} on {input}")]
    Failed { status: std::process::ExitStatus, input: PathBuf },
    #[error("tool exceeded {0:?} on {1}")]
    Timeout(Duration, PathBuf),
    #[error("tool exited 0 but wrote no output for {0}")]
    NoOutput(PathBuf),
}

impl ToolError {
    /// Launch-level problems abort an experiment; per-file problems only
    /// exclude the file.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            ToolError::MissingPlaceholder(_) | ToolError::ToolMissing(_) | ToolError::Launch { .. }
        )
    }
}

impl ToolTemplate {
    /// Split a command string on whitespace. Paths with spaces are not
    /// supported in templates; wrap such tools in a script.
    pub fn parse(command: &str) -> Result<Self, ToolError> {
        let argv: Vec<String> = command.split_whitespace().map(str::to_string).collect();
        Self::from_argv(argv)
    }

    pub fn from_argv(argv: Vec<String>) -> Result<Self, ToolError> {
        if argv.is_empty() || argv[0].contains("{in}") || argv[0].contains("{out}") {
            return Err(ToolError::MissingPlaceholder("program name"));
        }
        if !argv.iter().any(|a| a.contains("{in}")) {
            return Err(ToolError::MissingPlaceholder("{in}"));
        }
        if !argv.iter().any(|a| a.contains("{out}")) {
            return Err(ToolError::MissingPlaceholder("{out}"));
        }
        Ok(ToolTemplate { argv })
    }

    pub fn program(&self) -> &str {
        &self.argv[0]
    }

    /// Transform `input`, writing the result under `out_dir`. Returns the
    /// output path on success.
    pub fn run(
        &self,
        input: &Path,
        out_dir: &Path,
        timeout: Duration,
    ) -> Result<PathBuf, ToolError> {
        let stem = input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".into());
        let out_path = out_dir.join(format!("{stem}.out"));
        let _ = std::fs::remove_file(&out_path);
        let in_str = input.to_string_lossy();
        let out_str = out_path.to_string_lossy();
        let argv: Vec<String> = self
            .argv
            .iter()
            .map(|a| a.replace("{in}", &in_str).replace("{out}", &out_str))
            .collect();
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    ToolError::ToolMissing(argv[0].clone())
                } else {
                    ToolError::Launch { program: argv[0].clone(), source: e }
                }
            })?;
        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {
                    if started.elapsed() > timeout {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(ToolError::Timeout(timeout, input.to_path_buf()));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => {
                    return Err(ToolError::Launch { program: argv[0].clone(), source: e })
                }
            }
        };
        if !status.success() {
            return Err(ToolError::Failed { status, input: input.to_path_buf() });
        }
        if !out_path.is_file() {
            return Err(ToolError::NoOutput(input.to_path_buf()));
        }
        Ok(out_path)
    }
}

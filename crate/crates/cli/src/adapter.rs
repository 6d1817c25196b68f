//! External detectors behind a subprocess line protocol.
//!
//! The adapter process speaks newline-delimited UTF-8 on stdin/stdout:
//!
//! ```text
//! adapter emits:  READY                       (once, within startup_timeout)
//! harness sends:  SCAN <absolute-path>
//! adapter emits:  SCORE <decimal in [0,1]>
//!            or:  DECISION MALICIOUS | DECISION BENIGN
//!            or:  ERROR <message>
//! harness sends:  QUIT                        (adapter exits 0)
//! ```
//!
//! `DECISION` replies map to scores 1.0 / 0.0. One process handles one
//! scan at a time; the harness serializes access internally, so a handle
//! can still be shared across scanning threads.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use gauntlet_core::detect::{Detector, DetectorError};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdapterConfig {
    /// argv template: program followed by its arguments.
    pub command: Vec<String>,
    pub startup_timeout: Duration,
    pub scan_timeout: Duration,
    /// Respawn the process and retry once after a crash or timeout.
    pub restart_on_error: bool,
}

impl AdapterConfig {
    pub fn new(command: Vec<String>) -> Self {
        AdapterConfig {
            command,
            startup_timeout: Duration::from_secs(10),
            scan_timeout: Duration::from_secs(30),
            restart_on_error: true,
        }
    }
}

struct AdapterProcess {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl AdapterProcess {
    fn spawn(cfg: &AdapterConfig) -> Result<Self, DetectorError> {
        if cfg.command.is_empty() {
            return Err(DetectorError::AdapterProtocolError("empty adapter command".into()));
        }
        let mut child = Command::new(&cfg.command[0])
            .args(&cfg.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| {
                DetectorError::AdapterCrashed(format!("spawn {}: {e}", cfg.command[0]))
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                match line {
                    Ok(l) => {
                        if tx.send(l).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
            // channel closes on EOF; the receiver sees Disconnected
        });
        let mut proc = AdapterProcess { child, stdin, lines };
        match proc.recv(cfg.startup_timeout) {
            Ok(l) if l.trim() == "READY" => Ok(proc),
            Ok(l) => {
                proc.kill();
                Err(DetectorError::AdapterProtocolError(format!(
                    "expected READY, got {l:?}"
                )))
            }
            Err(e) => {
                proc.kill();
                Err(e)
            }
        }
    }

    fn recv(&mut self, timeout: Duration) -> Result<String, DetectorError> {
        match self.lines.recv_timeout(timeout) {
            Ok(l) => Ok(l),
            Err(RecvTimeoutError::Timeout) => Err(DetectorError::AdapterTimeout),
            Err(RecvTimeoutError::Disconnected) => {
                Err(DetectorError::AdapterCrashed("process closed its stdout".into()))
            }
        }
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn quit(&mut self) {
        if writeln!(self.stdin, "QUIT").and_then(|_| self.stdin.flush()).is_ok() {
            // give it a moment to exit on its own before reaping
            for _ in 0..50 {
                if matches!(self.child.try_wait(), Ok(Some(_))) {
                    return;
                }
                std::thread::sleep(Duration::from_millis(2));
            }
        }
        self.kill();
    }
}

/// Handle to one external detector. Scans are serialized on an internal
/// lock; the process is started lazily and restarted per config.
pub struct ExternalDetector {
    cfg: AdapterConfig,
    proc: Mutex<Option<AdapterProcess>>,
}

impl ExternalDetector {
    pub fn new(cfg: AdapterConfig) -> Self {
        ExternalDetector { cfg, proc: Mutex::new(None) }
    }

    /// Spawn eagerly so startup failures surface before any scan.
    pub fn connect(cfg: AdapterConfig) -> Result<Self, DetectorError> {
        let proc = AdapterProcess::spawn(&cfg)?;
        Ok(ExternalDetector { cfg, proc: Mutex::new(Some(proc)) })
    }

    /// One SCAN round-trip against the live process.
    fn scan_once(&self, proc: &mut AdapterProcess, path: &Path) -> Result<f64, DetectorError> {
        writeln!(proc.stdin, "SCAN {}", path.display())
            .and_then(|_| proc.stdin.flush())
            .map_err(|e| DetectorError::AdapterCrashed(format!("write failed: {e}")))?;
        let reply = proc.recv(self.cfg.scan_timeout)?;
        parse_reply(&reply)
    }

    /// Score a file on disk, restarting the adapter once if allowed.
    pub fn scan_path(&self, path: &Path) -> Result<f64, DetectorError> {
        let abs = absolutize(path)?;
        let mut guard = self.proc.lock().expect("adapter lock");
        if guard.is_none() {
            *guard = Some(AdapterProcess::spawn(&self.cfg)?);
        }
        let result = self.scan_once(guard.as_mut().expect("just spawned"), &abs);
        match result {
            Err(DetectorError::AdapterCrashed(_)) | Err(DetectorError::AdapterTimeout)
                if self.cfg.restart_on_error =>
            {
                if let Some(mut dead) = guard.take() {
                    dead.kill();
                }
                *guard = Some(AdapterProcess::spawn(&self.cfg)?);
                self.scan_once(guard.as_mut().expect("just respawned"), &abs)
            }
            Err(e @ DetectorError::AdapterCrashed(_)) | Err(e @ DetectorError::AdapterTimeout) => {
                if let Some(mut dead) = guard.take() {
                    dead.kill();
                }
                Err(e)
            }
            other => other,
        }
    }
}

fn absolutize(path: &Path) -> Result<PathBuf, DetectorError> {
    if path.is_absolute() {
        Ok(path.to_path_buf())
    } else {
        std::env::current_dir()
            .map(|d| d.join(path))
            .map_err(|e| DetectorError::ScanFailed(format!("cannot resolve path: {e}")))
    }
}

fn parse_reply(reply: &str) -> Result<f64, DetectorError> {
    let reply = reply.trim();
    if let Some(rest) = reply.strip_prefix("SCORE ") {
        let score: f64 = rest
            .trim()
            .parse()
            .map_err(|_| DetectorError::AdapterProtocolError(format!("bad score {rest:?}")))?;
        if !(0.0..=1.0).contains(&score) || score.is_nan() {
            return Err(DetectorError::AdapterProtocolError(format!(
                "score out of range: {score}"
            )));
        }
        return Ok(score);
    }
    match reply {
        "DECISION MALICIOUS" => Ok(1.0),
        "DECISION BENIGN" => Ok(0.0),
        _ => {
            if let Some(msg) = reply.strip_prefix("ERROR") {
                Err(DetectorError::ScanFailed(msg.trim().to_string()))
            } else {
                Err(DetectorError::AdapterProtocolError(format!(
                    "unrecognized reply {reply:?}"
                )))
            }
        }
    }
}

impl Detector for ExternalDetector {
    /// The engine scans in-memory variants; the adapter protocol wants a
    /// path, so spill to a private temp file for the duration of the scan.
    fn score(&self, bytes: &[u8]) -> Result<f64, DetectorError> {
        let mut tmp = tempfile::Builder::new()
            .prefix("scan-")
            .tempfile()
            .map_err(|e| DetectorError::ScanFailed(format!("temp file: {e}")))?;
        tmp.write_all(bytes)
            .and_then(|_| tmp.flush())
            .map_err(|e| DetectorError::ScanFailed(format!("temp write: {e}")))?;
        self.scan_path(tmp.path())
    }
}

impl Drop for ExternalDetector {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.proc.lock() {
            if let Some(mut proc) = guard.take() {
                proc.quit();
            }
        }
    }
}

//! Orchestration layer: corpora on disk, external detector processes,
//! experiment execution, and report emission. Everything byte-level lives
//! in `gauntlet-core`; this crate owns IO, subprocesses, and the CLI.

pub mod adapter;
pub mod corpus;
pub mod engine;
pub mod exttool;
pub mod model_io;
pub mod report;
pub mod runconfig;

pub use gauntlet_core as core;

/// On-disk model format revision, printed by `--version` and embedded in
/// every model file header.
pub const MODEL_FORMAT_VERSION: u32 = gauntlet_core::ngram::MODEL_VERSION;

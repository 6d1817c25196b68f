//! Core algorithms for measuring the robustness of static malware detectors.
//!
//! Everything in this crate operates on in-memory byte buffers: parsing and
//! re-serializing PE images, applying functionality-preserving mutations,
//! searching for detector-critical byte regions, scoring bytes with a hashed
//! n-gram model, and turning scan outcomes into confusion-matrix metrics.
//! File IO, subprocess detector adapters, and the command-line surface live
//! in the companion `gauntlet` crate.

#![no_std]

extern crate alloc;

pub mod detect;
pub mod edit;
pub mod metrics;
pub mod mutate;
pub mod ngram;
pub mod occlude;
pub mod pe;
pub mod seed;
pub mod synth;

pub use detect::{Decision, Detector, DetectorError, DetectorHandle, ScanResult};
pub use pe::{Label, PeFile, RawBinary};

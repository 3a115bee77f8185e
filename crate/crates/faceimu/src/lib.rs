//! Std companion to `faceimu-core`: file formats, UDP replay/ingest,
//! and the `faceimu` command-line pipeline.

pub mod cli;
pub mod formats;
pub mod net;

pub use faceimu_core;

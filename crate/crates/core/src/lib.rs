//! Detector-agnostic evaluation toolkit for thermal object detection:
//! annotation handling, precision/recall/AP, test-time augmentation,
//! model ensembling, label-aware augmentation and latency benchmarking.

pub mod augment;
pub mod bench;
pub mod config;
pub mod detector;
pub mod ensemble;
pub mod error;
pub mod formats;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod plugin;
pub mod tta;

pub use error::{Error, Result};

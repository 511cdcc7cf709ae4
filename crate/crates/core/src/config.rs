//! The run configuration document: which dataset, which detectors, which
//! protocol and thresholds.
//!
//! Relative paths are resolved against the directory holding the document.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::detector::{DelayDetector, Detector, FileDetector, MockDetector, MockNoise};
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::formats::Dataset;
use crate::metrics::EvalConfig;
use crate::plugin::CommandDetector;
use crate::tta::TtaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorSpec {
    /// Replays a detection file.
    File {
        path: PathBuf,
        #[serde(default)]
        name: Option<String>,
    },
    /// Seeded simulation over the dataset's ground truth.
    Mock {
        name: String,
        #[serde(default)]
        noise: MockNoise,
        /// Fixed wall-time cost added to every call.
        #[serde(default)]
        cost_ms: f64,
    },
    Plugin(CommandDetector),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    #[default]
    Ttna,
    Tta,
    Ttme,
}

impl std::str::FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ttna" => Ok(ProtocolKind::Ttna),
            "tta" => Ok(ProtocolKind::Tta),
            "ttme" => Ok(ProtocolKind::Ttme),
            other => Err(Error::invalid(format!("unknown protocol '{other}'"))),
        }
    }
}

fn default_warmup() -> usize {
    10
}

fn default_iters() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default)]
    pub detectors: Vec<DetectorSpec>,
    #[serde(default)]
    pub protocol: ProtocolKind,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub tta: TtaConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    /// Overrides every mock's seed: mock `i` gets `seed + i`.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Document {
            origin: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    /// Makes relative paths relative to `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        for d in &mut self.detectors {
            match d {
                DetectorSpec::File { path, .. } => fix(path),
                DetectorSpec::Plugin(c) if c.program.components().count() > 1 => fix(&mut c.program),
                _ => {}
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.eval.validate()?;
        self.tta.validate()?;
        self.ensemble.merge.validate()?;
        if self.iters == 0 {
            return Err(Error::invalid("iters must be >= 1"));
        }
        Ok(())
    }
}

/// Instantiates detector specs against a loaded dataset.
pub fn build_detectors(specs: &[DetectorSpec], dataset: &Dataset, seed: Option<u64>) -> Result<Vec<Arc<dyn Detector>>> {
    let mut mock_index = 0u64;
    specs
        .iter()
        .map(|spec| -> Result<Arc<dyn Detector>> {
            Ok(match spec {
                DetectorSpec::File { path, name } => {
                    let d = FileDetector::from_file(path, &dataset.manifest)?;
                    match name {
                        Some(n) => {
                            let records = crate::formats::read_detections_file(path, Some(&dataset.manifest))?;
                            Arc::new(FileDetector::from_records(n.clone(), records, Some(&dataset.manifest)))
                        }
                        None => Arc::new(d),
                    }
                }
                DetectorSpec::Mock { name, noise, cost_ms } => {
                    let mut noise = noise.clone();
                    if let Some(s) = seed {
                        noise.global_seed = s.wrapping_add(mock_index);
                    }
                    mock_index += 1;
                    let mock = MockDetector::for_dataset(name.clone(), dataset, noise)?;
                    if !(cost_ms.is_finite() && *cost_ms >= 0.0) {
                        return Err(Error::invalid("cost_ms must be finite and >= 0"));
                    }
                    if *cost_ms > 0.0 {
                        Arc::new(DelayDetector::new(mock, Duration::from_secs_f64(cost_ms / 1000.0)))
                    } else {
                        Arc::new(mock)
                    }
                }
                DetectorSpec::Plugin(c) => Arc::new(c.clone()),
            })
        })
        .collect()
}

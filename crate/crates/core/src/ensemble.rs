//! Model ensembling: pool the detections of several detectors and fuse
//! them into one output, plus exhaustive best-subset selection.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ViewKey};
use crate::error::{Error, Result};
use crate::formats::Dataset;
use crate::fusion::Merge;
use crate::geometry::{AffineTransform, Detection, Size};
use crate::metrics::{evaluate, EvalConfig, Protocol};
use crate::tta::{tta_detect, TtaConfig};

/// Largest candidate pool accepted by [`select_best_subset`].
pub const MAX_CANDIDATES: usize = 8;

/// Serializable part of an ensemble; members are named separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EnsembleConfig {
    #[serde(default)]
    pub merge: Merge,
    /// Per-member score multipliers; missing entries default to 1.0.
    #[serde(default)]
    pub weights: Vec<f64>,
    /// Wrap every member in test-time augmentation.
    #[serde(default)]
    pub tta: Option<TtaConfig>,
    /// Query members concurrently for each image.
    #[serde(default)]
    pub parallel: bool,
}

#[derive(Clone)]
pub struct Member {
    pub detector: Arc<dyn Detector>,
    pub weight: f64,
}

#[derive(Clone)]
pub struct Ensemble {
    members: Vec<Member>,
    merge: Merge,
    tta: Option<TtaConfig>,
    parallel: bool,
}

impl Ensemble {
    pub fn new(detectors: Vec<Arc<dyn Detector>>, cfg: &EnsembleConfig) -> Result<Self> {
        if detectors.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one member"));
        }
        if cfg.weights.len() > detectors.len() {
            return Err(Error::invalid("more weights than ensemble members"));
        }
        cfg.merge.validate()?;
        if let Some(t) = &cfg.tta {
            t.validate()?;
        }
        let members = detectors
            .into_iter()
            .enumerate()
            .map(|(i, detector)| {
                let weight = cfg.weights.get(i).copied().unwrap_or(1.0);
                if !(weight.is_finite() && weight > 0.0) {
                    return Err(Error::invalid(format!("member weight {weight} must be > 0")));
                }
                Ok(Member { detector, weight })
            })
            .collect::<Result<_>>()?;
        Ok(Ensemble {
            members,
            merge: cfg.merge,
            tta: cfg.tta.clone(),
            parallel: cfg.parallel,
        })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn name(&self) -> String {
        self.members
            .iter()
            .map(|m| m.detector.name())
            .collect::<Vec<_>>()
            .join("+")
    }

    fn member_detections(&self, m: &Member, image_id: &str, canvas: Size) -> Result<Vec<Detection>> {
        let raw = match &self.tta {
            Some(cfg) => tta_detect(m.detector.as_ref(), image_id, canvas, cfg),
            None => m.detector.detect(&ViewKey::identity(image_id), &AffineTransform::identity(), canvas),
        }
        .map_err(|e| Error::Member {
            member: m.detector.name().to_string(),
            source: Box::new(e),
        })?;
        Ok(raw
            .into_iter()
            .map(|d| Detection {
                score: (d.score * m.weight).min(1.0),
                ..d
            })
            .collect())
    }
}

/// Pools every member's weighted detections in member order and fuses them.
pub fn ensemble_detect(ensemble: &Ensemble, image_id: &str, canvas: Size) -> Result<Vec<Detection>> {
    let per_member: Vec<Vec<Detection>> = if ensemble.parallel {
        ensemble
            .members
            .par_iter()
            .map(|m| ensemble.member_detections(m, image_id, canvas))
            .collect::<Result<_>>()?
    } else {
        ensemble
            .members
            .iter()
            .map(|m| ensemble.member_detections(m, image_id, canvas))
            .collect::<Result<_>>()?
    };
    let pooled: Vec<Detection> = per_member.into_iter().flatten().collect();
    Ok(ensemble.merge.apply(&pooled))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetScore {
    /// Candidate indices, ascending.
    pub members: Vec<usize>,
    pub names: Vec<String>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetSelection {
    /// Every evaluated subset, best first.
    pub ranked: Vec<SubsetScore>,
}

impl SubsetSelection {
    pub fn best(&self) -> &SubsetScore {
        &self.ranked[0]
    }

    pub fn render_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("selection serializes") + "\n"
    }

    pub fn render_table(&self, percent: bool) -> String {
        let s = if percent { 100.0 } else { 1.0 };
        let mut out = format!("{:>4}  {:>9}  members\n", "rank", if percent { "mAP %" } else { "mAP" });
        for (i, r) in self.ranked.iter().enumerate() {
            let _ = writeln!(out, "{:>4}  {:>9.3}  {}", i + 1, r.map * s, r.names.join(" + "));
        }
        out
    }
}

/// Non-empty subsets of `0..n` with at most `max_size` elements, ordered by
/// size and then lexicographically.
pub fn enumerate_subsets(n: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut all: Vec<Vec<usize>> = (1u32..(1 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect::<Vec<_>>())
        .filter(|s| s.len() <= max_size)
        .collect();
    all.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    all
}

/// Evaluates every non-empty subset of at most `max_size` candidates as a
/// fused ensemble and ranks them by mAP; ties go to the smaller subset, then
/// to the lexicographically first member list.
pub fn select_best_subset(
    candidates: &[Arc<dyn Detector>],
    dataset: &Dataset,
    eval_cfg: &EvalConfig,
    max_size: usize,
    ensemble_cfg: &EnsembleConfig,
) -> Result<SubsetSelection> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate detectors"));
    }
    if candidates.len() > MAX_CANDIDATES {
        return Err(Error::invalid(format!(
            "exhaustive search supports at most {MAX_CANDIDATES} candidates, got {}",
            candidates.len()
        )));
    }
    if max_size == 0 || max_size > candidates.len() {
        return Err(Error::invalid(format!(
            "max_size must be in 1..={}, got {max_size}",
            candidates.len()
        )));
    }
    let mut ranked: Vec<SubsetScore> = enumerate_subsets(candidates.len(), max_size)
        .into_par_iter()
        .map(|subset| {
            let members: Vec<Arc<dyn Detector>> = subset.iter().map(|&i| candidates[i].clone()).collect();
            let weights = subset
                .iter()
                .map(|&i| ensemble_cfg.weights.get(i).copied().unwrap_or(1.0))
                .collect();
            let cfg = EnsembleConfig { weights, ..ensemble_cfg.clone() };
            let ensemble = Ensemble::new(members, &cfg)?;
            let report = evaluate(dataset, &Protocol::Ttme(&ensemble), eval_cfg)?;
            Ok(SubsetScore {
                names: subset.iter().map(|&i| candidates[i].name().to_string()).collect(),
                members: subset,
                map: report.map,
            })
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        b.map
            .total_cmp(&a.map)
            .then(a.members.len().cmp(&b.members.len()))
            .then_with(|| a.members.cmp(&b.members))
    });
    Ok(SubsetSelection { ranked })
}

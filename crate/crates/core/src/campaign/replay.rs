//! Re-run the check behind a recorded defect and compare its trigger.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use super::detect::Harness;
use super::report::CampaignReport;
use crate::graph::{parse_model_dsl, Model};
use crate::oracles::{DefectFamily, DefectReport};

/// Relative tolerance on replayed measurements, except exact families.
pub const TOLERANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("report has {len} defects, index {index} is out of range")]
    NoSuchDefect { index: usize, len: usize },
    #[error("cannot load model {path}: {message}")]
    Model { path: String, message: String },
    #[error("loaded model hashes to {found}, report expects {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("cannot arm faults: {0}")]
    Faults(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayOutcome {
    pub index: usize,
    pub family: DefectFamily,
    pub trigger: String,
    pub recorded: f64,
    /// `None` when the rerun raised no report of the same family and trigger.
    pub replayed: Option<f64>,
    pub exact: bool,
    pub reproduced: bool,
}

/// Crash and outlier triggers are counts, compared exactly.
pub fn is_exact(family: DefectFamily) -> bool {
    matches!(
        family,
        DefectFamily::CrashMutation | DefectFamily::CrashExecution | DefectFamily::AccuracyOutlier
    )
}

pub fn within_tolerance(recorded: f64, replayed: f64, exact: bool) -> bool {
    if exact || !recorded.is_finite() {
        return recorded == replayed || (recorded.is_nan() && replayed.is_nan());
    }
    (replayed - recorded).abs() <= TOLERANCE * recorded.abs()
}

fn find_match<'a>(found: &'a [DefectReport], want: &DefectReport) -> Option<&'a DefectReport> {
    found
        .iter()
        .find(|r| r.defect_family == want.defect_family && r.trigger == want.trigger && r.phase == want.phase)
}

/// Replay defect `index` against `model` with `faults` armed on backend B.
pub fn replay_model(
    report: &CampaignReport,
    index: usize,
    model: &Model,
    faults: &[String],
) -> Result<ReplayOutcome, ReplayError> {
    let defect = report.defects.get(index).ok_or(ReplayError::NoSuchDefect {
        index,
        len: report.defects.len(),
    })?;
    let cfg = &report.config;
    let harness = Harness::new(faults, cfg.oracles.clone(), cfg.dataset.clone(), cfg.train_steps, cfg.master_seed)
        .map_err(|e| ReplayError::Faults(e.to_string()))?;
    let want = &defect.report;
    let found = harness.run(defect.stage, model);
    let exact = is_exact(want.defect_family);
    let recorded = want.trigger_value().unwrap_or(f64::NAN);
    let replayed = find_match(&found, want).and_then(|r| r.trigger_value());
    Ok(ReplayOutcome {
        index,
        family: want.defect_family,
        trigger: want.trigger.clone(),
        recorded,
        replayed,
        exact,
        reproduced: replayed.is_some_and(|v| within_tolerance(recorded, v, exact)),
    })
}

/// Load the defect's model from `dir/models` and replay it with the
/// campaign's own faults.
pub fn replay(report: &CampaignReport, dir: &Path, index: usize) -> Result<ReplayOutcome, ReplayError> {
    let defect = report.defects.get(index).ok_or(ReplayError::NoSuchDefect {
        index,
        len: report.defects.len(),
    })?;
    let model = load_model(dir, &defect.report.model_ref.path, &defect.report.model_ref.hash)?;
    replay_model(report, index, &model, &report.config.arm_faults)
}

pub fn load_model(dir: &Path, rel: &str, hash: &str) -> Result<Model, ReplayError> {
    let path = dir.join(rel);
    let err = |message: String| ReplayError::Model {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(&path).map_err(|e| err(e.to_string()))?;
    let model = parse_model_dsl(&text).map_err(|e| err(e.to_string()))?;
    let found = model.content_hash();
    if found != hash {
        return Err(ReplayError::HashMismatch {
            expected: hash.to_string(),
            found,
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_rules() {
        assert!(within_tolerance(100.0, 100.9, false));
        assert!(!within_tolerance(100.0, 101.1, false));
        assert!(within_tolerance(2.0, 2.0, true));
        assert!(!within_tolerance(2.0, 2.0000001, true));
        assert!(within_tolerance(f64::INFINITY, f64::INFINITY, false));
        assert!(is_exact(DefectFamily::AccuracyOutlier));
        assert!(!is_exact(DefectFamily::ResourceLeak));
    }
}

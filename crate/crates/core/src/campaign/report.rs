//! The campaign report document and its persistence.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::CampaignConfig;
use super::detect::Stage;
use crate::coverage::CoverageStats;
use crate::graph::{serialize_model, Model, OpId};
use crate::legality::Violation;
use crate::mutate::Rejection;
use crate::oracles::DefectReport;
use crate::scheduler::Estimator;

/// Bumped whenever a field changes meaning; matches `schema/campaign_report.schema.json`.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    /// The operator produced a mutant that passed the filter.
    Legal,
    /// The operator produced a mutant that the filter refused.
    Illegal,
    /// The operator found no admissible edit.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub op: OpId,
    pub seed_hash: String,
    pub outcome: Outcome,
    pub legal: bool,
    pub mutant_hash: Option<String>,
    pub rejection: Option<Rejection>,
    pub violations: Vec<Violation>,
    pub reward: f64,
    /// Whether the mutant entered the pool.
    pub added: bool,
    pub next_seed_hash: String,
    /// Estimator that learned this round; absent for the baselines.
    pub updated: Option<Estimator>,
    pub q_snapshot: String,
    /// Virtual milliseconds spent probing the mutant.
    pub generation_ms: f64,
    pub pool_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    #[serde(flatten)]
    pub report: DefectReport,
    pub stage: Stage,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub rounds: usize,
    pub legal: usize,
    pub illegal: usize,
    pub rejected: usize,
    pub by_op: BTreeMap<OpId, OpCounts>,
    pub by_rejection: BTreeMap<String, usize>,
    pub by_family: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    pub selected: usize,
    pub legal: usize,
    pub illegal: usize,
    pub rejected: usize,
}

/// Virtual-clock timings, in milliseconds, so reports stay reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub generation_ms: f64,
    /// `generation_ms` divided by the number of legal mutants.
    pub generation_ms_per_legal: f64,
    pub sweep_ms: f64,
    pub execution_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub hash: String,
    pub reward: f64,
    pub select_num: u64,
    pub snums: [u64; 7],
    pub history: Vec<OpId>,
    pub depth: usize,
}

impl PoolEntry {
    pub fn of(m: &Model) -> Self {
        Self {
            hash: m.content_hash(),
            reward: m.lineage.reward,
            select_num: m.lineage.select_num,
            snums: m.lineage.snums,
            history: m.lineage.mutation_history.clone(),
            depth: m.metadata.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub schema_version: u32,
    pub config: CampaignConfig,
    pub seed_hash: String,
    pub rounds: Vec<RoundRecord>,
    pub defects: Vec<Defect>,
    /// Initial coverage, then one entry after each round.
    pub coverage: Vec<CoverageStats>,
    /// Legal mutants over produced mutants; 0 when none were produced.
    pub legal_rate: f64,
    pub counts: Counts,
    pub timings: Timings,
    /// Pool after the loop, in insertion order.
    pub pool: Vec<PoolEntry>,
    /// Hashes removed by the sweep.
    pub removed: Vec<String>,
    /// Hashes executed in depth, best reward first.
    pub top_k: Vec<String>,
    /// Serialized models keyed by hash: every pool member and defect model.
    #[serde(skip)]
    pub models: BTreeMap<String, Model>,
}

impl CampaignReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Write `report.json` and one DSL file per referenced model.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let models = dir.join("models");
        std::fs::create_dir_all(&models)?;
        for (hash, m) in &self.models {
            std::fs::write(models.join(format!("{hash}.gm")), serialize_model(m))?;
        }
        std::fs::write(dir.join("report.json"), self.to_json())
    }
}

//! Strategy comparison: repeated mutation loops per strategy on shared seeds.

use serde::{Deserialize, Serialize};

use super::config::{CampaignConfig, ConfigError};
use super::run_loop;
use crate::coverage::CoverageStats;
use crate::rng;
use crate::scheduler::Strategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub strategy: Strategy,
    pub repetition: usize,
    pub master_seed: u64,
    pub legal_rate: f64,
    pub legal: usize,
    pub generation_ms_per_legal: f64,
    pub coverage: Vec<CoverageStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub median_legal_rate: f64,
    pub mean_generation_ms_per_legal: f64,
    pub median_final_lic: f64,
    pub median_final_lpc: f64,
    pub median_final_lsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: CampaignConfig,
    pub repetitions: usize,
    pub runs: Vec<AblationRun>,
    pub summary: Vec<StrategySummary>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Master seed of repetition `rep`; every strategy sees the same sequence.
pub fn repetition_seed(master: u64, rep: usize) -> u64 {
    rng::derive_indexed(master, "ablation", rep as u64)
}

pub fn run_ablation(
    cfg: &CampaignConfig,
    strategies: &[Strategy],
    repetitions: usize,
) -> Result<AblationReport, ConfigError> {
    cfg.validate()?;
    if strategies.is_empty() || repetitions == 0 {
        return Err(ConfigError::Invalid("ablation needs at least one strategy and one repetition".into()));
    }
    let seed = cfg.load_seed()?;
    let jobs: Vec<(Strategy, usize)> = strategies
        .iter()
        .flat_map(|&s| (0..repetitions).map(move |r| (s, r)))
        .collect();
    let runs: Vec<AblationRun> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(strategy, repetition)| {
                let seed = seed.clone();
                scope.spawn(move || {
                    let sub = CampaignConfig {
                        strategy,
                        master_seed: repetition_seed(cfg.master_seed, repetition),
                        ..cfg.clone()
                    };
                    let lp = run_loop(&sub, seed);
                    AblationRun {
                        strategy,
                        repetition,
                        master_seed: sub.master_seed,
                        legal_rate: lp.legal_rate(),
                        legal: lp.rounds.iter().filter(|r| r.legal).count(),
                        generation_ms_per_legal: lp.generation_ms_per_legal(),
                        coverage: lp.coverage,
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation thread")).collect()
    });
    let summary = strategies
        .iter()
        .map(|&s| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.strategy == s).collect();
            let pick = |f: &dyn Fn(&AblationRun) -> f64| mine.iter().map(|r| f(r)).collect::<Vec<_>>();
            let last = |r: &AblationRun| *r.coverage.last().expect("coverage has an initial entry");
            let times = pick(&|r| r.generation_ms_per_legal);
            StrategySummary {
                strategy: s,
                median_legal_rate: median(&pick(&|r| r.legal_rate)),
                mean_generation_ms_per_legal: times.iter().sum::<f64>() / times.len() as f64,
                median_final_lic: median(&pick(&|r| last(r).lic)),
                median_final_lpc: median(&pick(&|r| last(r).lpc)),
                median_final_lsc: median(&pick(&|r| last(r).lsc)),
            }
        })
        .collect();
    Ok(AblationReport {
        config: cfg.clone(),
        repetitions,
        runs,
        summary,
    })
}

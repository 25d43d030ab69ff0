//! End-to-end campaign: the mutation loop, the post-loop sweep, top-k
//! selection and deep differential execution.

pub mod ablation;
pub mod config;
pub mod detect;
pub mod replay;
pub mod report;

use std::collections::BTreeMap;

use rand::Rng;

pub use config::{CampaignConfig, ConfigError};
pub use detect::{model_ref, Harness, Stage};
pub use report::{CampaignReport, Counts, Defect, OpCounts, Outcome, PoolEntry, RoundRecord, Timings};

use crate::coverage::{Coverage, CoverageStats};
use crate::exec::ExecutionTrace;
use crate::graph::{Model, OpId};
use crate::legality::{judge_against, ProbeConfig};
use crate::mutate;
use crate::rng;
use crate::scheduler::{
    featurize, mcmc_seed, random_select, reward, select_operator, select_seed_ucb, update_double_q, Mcmc, QPair,
    Strategy,
};

/// Insertion-ordered model pool with lowest-reward eviction.
#[derive(Debug, Clone)]
pub struct Pool {
    pub members: Vec<Model>,
    capacity: usize,
}

impl Pool {
    pub fn new(seed: Model, capacity: usize) -> Self {
        Self {
            members: vec![seed],
            capacity,
        }
    }

    pub fn position(&self, hash: &str) -> Option<usize> {
        self.members.iter().position(|m| m.content_hash() == hash)
    }

    /// Add `m` unless a structurally identical model is present. Returns
    /// whether `m` is in the pool afterwards.
    pub fn insert(&mut self, m: Model) -> bool {
        let hash = m.content_hash();
        if self.position(&hash).is_some() {
            return false;
        }
        self.members.push(m);
        if self.members.len() > self.capacity {
            let worst = (0..self.members.len())
                .min_by(|&i, &j| self.members[i].lineage.reward.total_cmp(&self.members[j].lineage.reward))
                .expect("pool is non-empty");
            self.members.remove(worst);
            return self.position(&hash).is_some();
        }
        true
    }
}

/// State of the mutation loop between rounds.
pub struct MutationLoop<'a> {
    cfg: &'a CampaignConfig,
    probe: ProbeConfig,
    pub pool: Pool,
    /// Current seed `d`.
    pub cur: Model,
    pub q: QPair,
    mcmc: Mcmc,
    mcmc_index: usize,
    /// Inference probe of the original seed, the MC7 time reference.
    root_probe: ExecutionTrace,
    probes: BTreeMap<String, ExecutionTrace>,
    pub coverage: Coverage,
}

impl<'a> MutationLoop<'a> {
    pub fn new(cfg: &'a CampaignConfig, seed: Model) -> Self {
        let mut coverage = Coverage::default();
        coverage.add(&seed);
        let probe = ProbeConfig {
            seed: rng::derive_seed(cfg.master_seed, "campaign/probe"),
            thresholds: cfg.legality.clone(),
        };
        let root_probe = probe.infer(&seed);
        let probes = BTreeMap::from([(seed.content_hash(), root_probe.clone())]);
        Self {
            cfg,
            probe,
            pool: Pool::new(seed.clone(), cfg.pool_capacity),
            cur: seed,
            q: QPair::new(rng::derive_seed(cfg.master_seed, "campaign/q")),
            mcmc: Mcmc::new(cfg.hyperparams.temperature),
            mcmc_index: 0,
            probes,
            root_probe,
            coverage,
        }
    }

    fn seed_probe(&mut self, d: &Model) -> ExecutionTrace {
        let probe = &self.probe;
        self.probes.entry(d.content_hash()).or_insert_with(|| probe.infer(d)).clone()
    }

    /// Pick the seed and operator for round `n`.
    fn choose(&mut self, n: u64) -> (Model, OpId) {
        let mut r = rng::indexed_stream(self.cfg.master_seed, "round/select", n);
        let hp = &self.cfg.hyperparams;
        match self.cfg.strategy {
            Strategy::DoubleQ => {
                let op = select_operator(&self.q, &featurize(&self.cur), hp.epsilon, &mut r);
                (self.cur.clone(), op)
            }
            Strategy::Random => {
                let i = r.gen_range(0..self.pool.members.len());
                (self.pool.members[i].clone(), random_select(&mut r))
            }
            Strategy::Mcmc => {
                let i = mcmc_seed(&self.pool.members, self.mcmc_index, hp.temperature, &mut r);
                self.mcmc_index = i;
                (self.pool.members[i].clone(), self.mcmc.mcmc_select(&mut r))
            }
        }
    }

    pub fn round(&mut self, n: usize) -> RoundRecord {
        let cfg = self.cfg;
        let hp = &cfg.hyperparams;
        let (d, op) = self.choose(n as u64);
        let state = featurize(&d);
        let seed_hash = d.content_hash();
        let outcome = mutate::apply(op, &d, rng::derive_indexed(cfg.master_seed, "round/mutate", n as u64));
        if let Some(i) = self.pool.position(&seed_hash) {
            self.pool.members[i].lineage.record_selection(op);
        }

        let mut rec = RoundRecord {
            round: n,
            op,
            seed_hash,
            outcome: Outcome::Rejected,
            legal: false,
            mutant_hash: None,
            rejection: outcome.rejection,
            violations: Vec::new(),
            reward: cfg.penalty,
            added: false,
            next_seed_hash: String::new(),
            updated: None,
            q_snapshot: String::new(),
            generation_ms: 0.0,
            pool_size: 0,
        };
        let next = match outcome.mutant {
            Some(mut m) => {
                let seed_probe = self.seed_probe(&d);
                let verdict = judge_against(&m, &self.root_probe, &self.probe);
                rec.mutant_hash = Some(m.content_hash());
                rec.generation_ms = verdict.probe[0].total_time() + verdict.probe[1].total_time();
                rec.violations = verdict.violations.clone();
                rec.rejection = verdict.rejection();
                if verdict.legal {
                    rec.outcome = Outcome::Legal;
                    rec.legal = true;
                    rec.reward = reward(&seed_probe, &verdict.probe[0], cfg.penalty);
                    m.lineage.reward = rec.reward;
                    self.probes.insert(m.content_hash(), verdict.probe[0].clone());
                    self.coverage.add(&m);
                    rec.added = self.pool.insert(m.clone());
                    Some(m)
                } else {
                    rec.outcome = Outcome::Illegal;
                    None
                }
            }
            None => None,
        };
        let next = next.unwrap_or_else(|| self.pool.members[select_seed_ucb(&self.pool.members, op, hp.ucb_c)].clone());
        match cfg.strategy {
            Strategy::DoubleQ => {
                let mut coin = rng::indexed_stream(cfg.master_seed, "round/coin", n as u64);
                rec.updated = Some(update_double_q(&mut self.q, &state, op, rec.reward, &featurize(&next), hp, &mut coin));
            }
            Strategy::Mcmc => self.mcmc.observe(op, rec.reward),
            Strategy::Random => {}
        }
        rec.next_seed_hash = next.content_hash();
        rec.q_snapshot = self.q.snapshot_hash();
        rec.pool_size = self.pool.members.len();
        self.cur = next;
        rec
    }

    pub fn coverage_stats(&self) -> CoverageStats {
        self.coverage.stats()
    }
}

fn tally(rounds: &[RoundRecord], defects: &[Defect]) -> Counts {
    let mut c = Counts {
        rounds: rounds.len(),
        ..Counts::default()
    };
    for r in rounds {
        let e = c.by_op.entry(r.op).or_default();
        e.selected += 1;
        match r.outcome {
            Outcome::Legal => {
                c.legal += 1;
                e.legal += 1;
            }
            Outcome::Illegal => {
                c.illegal += 1;
                e.illegal += 1;
            }
            Outcome::Rejected => {
                c.rejected += 1;
                e.rejected += 1;
            }
        }
        if let Some(rej) = r.rejection {
            *c.by_rejection.entry(rej.to_string()).or_default() += 1;
        }
    }
    for d in defects {
        *c.by_family.entry(d.report.defect_family.to_string()).or_default() += 1;
    }
    c
}

/// Output of the mutation loop alone.
pub struct LoopResult {
    pub seed_hash: String,
    pub rounds: Vec<RoundRecord>,
    pub coverage: Vec<CoverageStats>,
    pub pool: Pool,
}

impl LoopResult {
    pub fn legal_rate(&self) -> f64 {
        let legal = self.rounds.iter().filter(|r| r.legal).count();
        let produced = self.rounds.iter().filter(|r| r.outcome != Outcome::Rejected).count();
        if produced == 0 {
            0.0
        } else {
            legal as f64 / produced as f64
        }
    }

    pub fn generation_ms(&self) -> f64 {
        self.rounds.iter().map(|r| r.generation_ms).sum()
    }

    /// Mean probing cost per legal mutant; 0 when none were legal.
    pub fn generation_ms_per_legal(&self) -> f64 {
        match self.rounds.iter().filter(|r| r.legal).count() {
            0 => 0.0,
            legal => self.generation_ms() / legal as f64,
        }
    }
}

pub fn run_loop(cfg: &CampaignConfig, seed: Model) -> LoopResult {
    let seed_hash = seed.content_hash();
    let mut lp = MutationLoop::new(cfg, seed);
    let mut coverage = vec![lp.coverage_stats()];
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for n in 0..cfg.rounds {
        rounds.push(lp.round(n));
        coverage.push(lp.coverage_stats());
    }
    LoopResult {
        seed_hash,
        rounds,
        coverage,
        pool: lp.pool,
    }
}

/// Run a campaign end to end on the configured seed model.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport, ConfigError> {
    cfg.validate()?;
    let seed = cfg.load_seed()?;
    let harness = Harness::new(&cfg.arm_faults, cfg.oracles.clone(), cfg.dataset.clone(), cfg.train_steps, cfg.master_seed)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let lp = run_loop(cfg, seed);

    let models: BTreeMap<String, Model> = lp.pool.members.iter().map(|m| (m.content_hash(), m.clone())).collect();
    let mut timings = Timings {
        generation_ms: lp.generation_ms(),
        generation_ms_per_legal: lp.generation_ms_per_legal(),
        ..Timings::default()
    };

    let mut defects = Vec::new();
    let mut survivors = Vec::new();
    let mut removed = Vec::new();
    for m in &lp.pool.members {
        let (found, ms) = harness.sweep(m);
        timings.sweep_ms += ms;
        if found.is_empty() {
            survivors.push(m);
        } else {
            removed.push(m.content_hash());
            defects.extend(found.into_iter().map(|report| Defect {
                report,
                stage: Stage::Sweep,
            }));
        }
    }
    survivors.sort_by(|a, b| b.lineage.reward.total_cmp(&a.lineage.reward));
    survivors.truncate(cfg.top_k);
    let executed: Vec<(Vec<_>, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = survivors.iter().map(|m| s.spawn(|| harness.execute(m))).collect();
        handles.into_iter().map(|h| h.join().expect("execution thread")).collect()
    });
    for (found, ms) in executed {
        timings.execution_ms += ms;
        defects.extend(found.into_iter().map(|report| Defect {
            report,
            stage: Stage::Execution,
        }));
    }

    Ok(CampaignReport {
        schema_version: report::SCHEMA_VERSION,
        config: cfg.clone(),
        counts: tally(&lp.rounds, &defects),
        legal_rate: lp.legal_rate(),
        seed_hash: lp.seed_hash,
        rounds: lp.rounds,
        defects,
        coverage: lp.coverage,
        timings,
        pool: lp.pool.members.iter().map(PoolEntry::of).collect(),
        removed,
        top_k: survivors.iter().map(|m| m.content_hash()).collect(),
        models,
    })
}

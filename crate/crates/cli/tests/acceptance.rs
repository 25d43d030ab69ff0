//! Acceptance suite: prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=3,4` runs a subset. `ACCEPTANCE_DUMP_GOLDEN=1` prints the
//! simulated five-round table used to freeze the golden trace.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use graphmut::campaign::ablation::run_ablation;
use graphmut::campaign::{run_campaign, run_loop, CampaignConfig, CampaignReport, Harness, Outcome, Stage};
use graphmut::coverage::{coverage, Coverage, CoverageStats};
use graphmut::exec::{faults, BackendId, Dataset, DatasetConfig, ExecutionTrace, Executor, ParamStore, TensorValue};
use graphmut::graph::{validate_graph, DType, Model, OpId, ParamValue, TensorSpec};
use graphmut::legality::{judge_against, ProbeConfig};
use graphmut::mutate::{self, audit, extent_range, Constraint, MutationTable, Rejection, LOSS_SITE, OPTIMIZER_SITE};
use graphmut::oracles::{dtw_distance, DefectReport};
use graphmut::rng::{derive_indexed, derive_seed, indexed_stream};
use graphmut::scheduler::{featurize, reward, ucb, ucb_score, QPair, StateFeatures, Strategy};
use graphmut::seeds;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria allowed to fail without failing the target; see the decisions ledger.
const KNOWN_RED: &[usize] = &[7];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn builtin(name: &str) -> Model {
    seeds::builtin(name).expect("bundled seed")
}

// ---------------------------------------------------------------- criterion 1

/// (r, select_num, snum, c, expected) with expected evaluated at 40 digits.
const UCB_TABLE: [(f64, u64, u64, f64, f64); 20] = [
    (0.0, 1, 1, 1.0, 0.0),
    (0.5, 2, 1, 1.0, 1.3325546111576977564),
    (0.25, 10, 3, 0.5, 0.68804348081307766489),
    (1.5, 100, 7, 2.0, 3.1221978364443171821),
    (-1.0, 5, 5, 1.0, -0.43264862520055521159),
    (0.125, 3, 2, 1.4142135623730951, 1.1731470739682050181),
    (2.0, 1000, 1, 0.1, 2.2628260884878466135),
    (0.75, 50, 49, 3.0, 1.5976643426095616395),
    (0.0, 7, 7, 0.0, 0.0),
    (0.001, 2, 2, 1.0, 0.58970501125773734553),
    (-0.5, 20, 1, 0.25, -0.067295404349428665454),
    (3.25, 64, 16, 1.0, 3.7598334950844044839),
    (0.9, 12345, 321, 1.0, 1.0713152929558786118),
    (0.05, 4, 3, 10.0, 6.8477799344587264546),
    (1.0, 1, 5, 1.0, 1.0),
    (0.333, 9, 4, 0.7, 0.85180633257862886184),
    (-2.5, 1000000, 1000, 1.0, -2.3824605999761600191),
    (0.6, 30, 29, 0.05, 0.6171232786239360043),
    (10.0, 2, 1, 100.0, 93.255461115769775635),
    (0.42, 17, 8, 1.25, 1.1638830427298230059),
];

/// Mean absolute difference, summed backwards with compensation.
fn mean_abs_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b).rev() {
        let term = (x - y).abs() - comp;
        let t = sum + term;
        comp = (t - sum) - term;
        sum = t;
    }
    sum / a.len() as f64
}

fn trace_with_output(base: &Model, value: TensorValue) -> ExecutionTrace {
    let mut t = ExecutionTrace::empty(BackendId::A, base);
    t.output_node = "out".into();
    t.per_layer_outputs.insert("out".into(), value);
    t
}

/// Minimum over every monotone warping path, enumerated explicitly.
fn dtw_exhaustive(x: &[f64], y: &[f64]) -> f64 {
    fn walk(x: &[f64], y: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (x[i] - y[j]).abs();
        if i + 1 == x.len() && j + 1 == y.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < x.len() {
            walk(x, y, i + 1, j, acc, best);
        }
        if j + 1 < y.len() {
            walk(x, y, i, j + 1, acc, best);
        }
        if i + 1 < x.len() && j + 1 < y.len() {
            walk(x, y, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(x, y, 0, 0, 0.0, &mut best);
    best
}

fn formula_fidelity() -> Verdict {
    let mut holder = builtin("lenet_small");
    let mut ucb_err = 0.0f64;
    for (i, &(r, n, s, c, want)) in UCB_TABLE.iter().enumerate() {
        let op = OpId::ALL[i % 7];
        holder.lineage.reward = r;
        holder.lineage.select_num = n;
        holder.lineage.snums = [0; 7];
        holder.lineage.snums[op.index()] = s;
        for got in [ucb(r, n, s, c), ucb_score(&holder, op, c)] {
            ucb_err = ucb_err.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    let untried = ucb(0.3, 4, 0, 1.0) == f64::INFINITY;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut reward_err = 0.0f64;
    let mut penalties_ok = true;
    for _ in 0..1000 {
        let rank = rng.gen_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=6)).collect();
        let spec = TensorSpec::new(DType::F64, shape);
        let scale = 10f64.powi(rng.gen_range(-3..=3));
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect() };
        let (a, b) = (draw(spec.numel()), draw(spec.numel()));
        let want = mean_abs_oracle(&a, &b);
        let ta = trace_with_output(&holder, TensorValue::new(spec.clone(), a.clone()));
        let tb = trace_with_output(&holder, TensorValue::new(spec.clone(), b));
        reward_err = reward_err.max((reward(&ta, &tb, -1.0) - want).abs() / want.max(1.0));
        penalties_ok &= reward(&ta, &ta, -1.0) == 0.0;

        let mut bad = a.clone();
        bad[0] = f64::NAN;
        let tn = trace_with_output(&holder, TensorValue::new(spec.clone(), bad));
        let mut wider = spec.shape.clone();
        wider[0] += 1;
        let tw = trace_with_output(
            &holder,
            TensorValue::new(TensorSpec::new(DType::F64, wider.clone()), vec![0.0; wider.iter().product()]),
        );
        penalties_ok &= reward(&ta, &tn, -1.0) == -1.0 && reward(&ta, &tw, -1.0) == -1.0;
    }

    let mut dtw_exact = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=6);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        if dtw_distance(&x, &y).unwrap().to_bits() == dtw_exhaustive(&x, &y).to_bits() {
            dtw_exact += 1;
        }
    }
    verdict(
        ucb_err <= 1e-12 && untried && reward_err <= 1e-12 && penalties_ok && dtw_exact == 1000,
        format!(
            "ucb max err {ucb_err:.1e} over 20 tuples; reward max err {reward_err:.1e} over 1000 tensors; \
             dtw exact {dtw_exact}/1000"
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

const GOLDEN_SEED_MODEL: &str = "vgg_small";
const GOLDEN_MASTER: u64 = 51;

/// One round of the hand simulation.
#[derive(Debug, Clone, PartialEq)]
struct SimRound {
    op: OpId,
    explored: bool,
    seed_hash: String,
    outcome: Outcome,
    reward: f64,
    mutant_hash: Option<String>,
    q1_updated: bool,
    next_hash: String,
    pool: Vec<String>,
    q_snapshot: String,
}

fn greedy(q: &QPair, s: &StateFeatures) -> OpId {
    let (a, b) = (q.q1.values(s), q.q2.values(s));
    let mut best = 0;
    for i in 1..7 {
        if a[i] + b[i] > a[best] + b[best] {
            best = i;
        }
    }
    OpId::ALL[best]
}

/// The mutation loop written out step by step from the primitives.
fn simulate(cfg: &CampaignConfig, seed: Model) -> Vec<SimRound> {
    let master = cfg.master_seed;
    let hp = &cfg.hyperparams;
    let probe = ProbeConfig {
        seed: derive_seed(master, "campaign/probe"),
        thresholds: cfg.legality.clone(),
    };
    let original = probe.infer(&seed);
    let mut q = QPair::new(derive_seed(master, "campaign/q"));
    let mut pool = vec![seed.clone()];
    let mut cur = seed;
    let mut out = Vec::new();
    for n in 0..cfg.rounds as u64 {
        let s = featurize(&cur);
        let mut sel = indexed_stream(master, "round/select", n);
        let explored = sel.gen::<f64>() <= hp.epsilon;
        let op = if explored { OpId::ALL[sel.gen_range(0..7)] } else { greedy(&q, &s) };
        let d = cur.clone();
        let app = mutate::apply(op, &d, derive_indexed(master, "round/mutate", n));
        if let Some(p) = pool.iter_mut().find(|m| m.content_hash() == d.content_hash()) {
            p.lineage.select_num += 1;
            p.lineage.snums[op.index()] += 1;
        }

        let mut r = cfg.penalty;
        let mut outcome = Outcome::Rejected;
        let mut mutant_hash = None;
        let mut next = None;
        if let Some(mut m) = app.mutant {
            mutant_hash = Some(m.content_hash());
            let v = judge_against(&m, &original, &probe);
            outcome = Outcome::Illegal;
            if v.legal {
                outcome = Outcome::Legal;
                let parent = probe.infer(&d);
                let (a, b) = (parent.final_output().unwrap(), v.probe[0].final_output().unwrap());
                r = if a.spec == b.spec && a.data.iter().chain(&b.data).all(|x| x.is_finite()) {
                    mean_abs_oracle(&a.data, &b.data)
                } else {
                    cfg.penalty
                };
                m.lineage.reward = r;
                if !pool.iter().any(|p| p.content_hash() == m.content_hash()) {
                    pool.push(m.clone());
                }
                next = Some(m);
            }
        }
        let next = next.unwrap_or_else(|| {
            let score = |m: &Model| {
                let k = m.lineage.snums[op.index()];
                if k == 0 {
                    f64::INFINITY
                } else {
                    m.lineage.reward + hp.ucb_c * ((m.lineage.select_num as f64).ln() / k as f64).sqrt()
                }
            };
            let mut best = 0;
            for i in 1..pool.len() {
                if score(&pool[i]) > score(&pool[best]) {
                    best = i;
                }
            }
            pool[best].clone()
        });

        let q1_updated = indexed_stream(master, "round/coin", n).gen::<f64>() <= 0.5;
        let sn = featurize(&next);
        let (own, other) = if q1_updated { (&mut q.q1, &q.q2) } else { (&mut q.q2, &q.q1) };
        let v = own.values(&sn);
        let mut a = 0;
        for i in 1..7 {
            if v[i] > v[a] {
                a = i;
            }
        }
        let target = r + hp.gamma * other.value(&sn, OpId::ALL[a]);
        own.step(&s, op, target, hp.alpha);

        out.push(SimRound {
            op,
            explored,
            seed_hash: d.content_hash(),
            outcome,
            reward: r,
            mutant_hash,
            q1_updated,
            next_hash: next.content_hash(),
            pool: pool.iter().map(|m| m.content_hash()).collect(),
            q_snapshot: q.snapshot_hash(),
        });
        cur = next;
    }
    out
}

/// Frozen table: op, explored, outcome, reward, mutant hash, Q1 updated, pool size.
const GOLDEN: [(&str, bool, &str, f64, &str, bool, usize); 5] = [
    ("MO7", false, "legal", 0.0, "520853e34655fef8", true, 2),
    ("MO6", false, "legal", 0.0, "dd0dc5803a6aad12", true, 3),
    ("MO4", false, "rejected", -1.0, "", true, 3),
    ("MO4", true, "rejected", -1.0, "", true, 3),
    ("MO2", true, "legal", 1.6167197920163745, "2b6ccbd9bb113a17", false, 4),
];

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Legal => "legal",
        Outcome::Illegal => "illegal",
        Outcome::Rejected => "rejected",
    }
}

fn golden_trace() -> Verdict {
    let cfg = CampaignConfig {
        seed_model_path: format!("builtin:{GOLDEN_SEED_MODEL}"),
        rounds: 5,
        master_seed: GOLDEN_MASTER,
        ..CampaignConfig::default()
    };
    let seed = cfg.load_seed().unwrap();
    let sim = simulate(&cfg, seed.clone());
    if std::env::var_os("ACCEPTANCE_DUMP_GOLDEN").is_some() {
        for r in &sim {
            println!(
                "    (\"{}\", {}, \"{}\", {:?}, \"{}\", {}, {}),",
                r.op,
                r.explored,
                outcome_name(r.outcome),
                r.reward,
                r.mutant_hash.clone().unwrap_or_default(),
                r.q1_updated,
                r.pool.len()
            );
        }
    }
    let lp = run_loop(&cfg, seed);
    let mut mismatches = Vec::new();
    for (i, (s, rec)) in sim.iter().zip(&lp.rounds).enumerate() {
        let same = s.op == rec.op
            && s.seed_hash == rec.seed_hash
            && s.outcome == rec.outcome
            && s.reward == rec.reward
            && s.mutant_hash == rec.mutant_hash
            && Some(s.q1_updated) == rec.updated.map(|e| e == graphmut::scheduler::Estimator::Q1)
            && s.next_hash == rec.next_seed_hash
            && s.pool.len() == rec.pool_size
            && s.q_snapshot == rec.q_snapshot;
        if !same {
            mismatches.push(format!("loop round {i}"));
        }
    }
    let final_pool: Vec<String> = lp.pool.members.iter().map(|m| m.content_hash()).collect();
    if sim.last().map(|r| &r.pool) != Some(&final_pool) {
        mismatches.push("final pool".into());
    }
    for (i, (s, g)) in sim.iter().zip(GOLDEN.iter()).enumerate() {
        let (op, explored, outcome, r, hash, q1, pool) = *g;
        let same = s.op.to_string() == op
            && s.explored == explored
            && outcome_name(s.outcome) == outcome
            && (s.reward - r).abs() <= 1e-12
            && s.mutant_hash.clone().unwrap_or_default() == hash
            && s.q1_updated == q1
            && s.pool.len() == pool;
        if !same {
            mismatches.push(format!("table round {i}"));
        }
    }
    let explored = sim.iter().filter(|r| r.explored).count();
    let failed = sim.iter().filter(|r| r.outcome != Outcome::Legal).count();
    verdict(
        mismatches.is_empty() && lp.rounds.len() == 5,
        format!(
            "5 rounds, {explored} exploratory, {failed} illegal or rejected; mismatches: {}",
            if mismatches.is_empty() { "none".to_string() } else { mismatches.join(", ") }
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn gradient_soundness() -> Verdict {
    let h = 1e-4;
    let (a, b) = (Executor::new(BackendId::A), Executor::new(BackendId::B));
    let mut total = 0usize;
    let mut good = [0usize; 2];
    let mut worst_seed = (String::new(), f64::INFINITY);
    for seed in seeds::all_builtin() {
        let mut m = seed.clone();
        let mut shape = m.input_spec.shape.clone();
        shape[0] = 2;
        m.input_spec = TensorSpec::new(DType::F64, shape);
        m.refresh_metadata();
        let data = Dataset::for_model(
            &m,
            &DatasetConfig {
                train_samples: 2,
                eval_samples: 2,
                seed: 5,
            },
        );
        let batch = &data.train[0];
        let mut p = ParamStore::init(&m, 9).unwrap();
        let ga = a.gradients(&m, &p, batch).unwrap().1;
        let gb = b.gradients(&m, &p, batch).unwrap().1;
        let keys: Vec<String> = p.tensors.keys().cloned().collect();
        let mut mine = [0usize; 2];
        let mut count = 0usize;
        for k in &keys {
            for i in 0..p.tensors[k].len() {
                let orig = p.tensors[k][i];
                p.tensors.get_mut(k).unwrap()[i] = orig + h;
                let lp = b.gradients(&m, &p, batch).unwrap().0;
                p.tensors.get_mut(k).unwrap()[i] = orig - h;
                let lm = b.gradients(&m, &p, batch).unwrap().0;
                p.tensors.get_mut(k).unwrap()[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                for (slot, g) in [&ga, &gb].into_iter().enumerate() {
                    let an = g[k][i];
                    if (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6) {
                        mine[slot] += 1;
                    }
                }
                count += 1;
            }
        }
        total += count;
        good[0] += mine[0];
        good[1] += mine[1];
        let frac = mine[0].min(mine[1]) as f64 / count as f64;
        if frac < worst_seed.1 {
            worst_seed = (seed.lineage.seed_id.clone(), frac);
        }
    }
    let fa = good[0] as f64 / total as f64;
    let fb = good[1] as f64 / total as f64;
    verdict(
        fa >= 0.99 && fb >= 0.99,
        format!(
            "{total} parameters; within 1e-3: backend A {:.4}, backend B {:.4}; worst seed {} at {:.4}",
            fa, fb, worst_seed.0, worst_seed.1
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn extent_param(m: &Model, id: &str) -> Option<&'static str> {
    match m.nodes[id].kind.name() {
        "Conv2d" => Some("out_channels"),
        "Dense" => Some("units"),
        _ => None,
    }
}

/// Values recorded when a node first appears in a chain.
#[derive(Default)]
struct Anchors {
    extent: BTreeMap<String, (String, usize)>,
    /// Branches ever added per merge site.
    branch_adds: BTreeMap<String, usize>,
    series_used: usize,
    series_budget: usize,
}

impl Anchors {
    fn new(seed: &Model) -> Self {
        let mut a = Self {
            series_budget: seed.metadata.depth / 5,
            ..Self::default()
        };
        a.adopt(seed, None);
        a
    }

    fn adopt(&mut self, m: &Model, parent: Option<&Model>) {
        for (id, n) in &m.nodes {
            let fresh = parent.is_none_or(|p| p.nodes.get(id).is_none_or(|pn| pn.kind != n.kind));
            if !fresh {
                continue;
            }
            if let Some(param) = extent_param(m, id) {
                self.extent.insert(id.clone(), (param.to_string(), n.int(param)));
            }
        }
    }

    fn merges_saturated(&self, m: &Model) -> bool {
        self.branch_adds.iter().any(|(id, n)| m.nodes.contains_key(id) && *n >= 2)
    }
}

/// Constraint breaches visible by comparing a mutant with its parent.
fn static_breaches(op: OpId, parent: &Model, m: &Model, anchors: &mut Anchors) -> Vec<String> {
    let table = MutationTable::builtin();
    let mut out = Vec::new();
    anchors.adopt(m, Some(parent));
    for (id, (param, anchor)) in &anchors.extent {
        let Some(n) = m.nodes.get(id) else { continue };
        let v = n.int(param);
        let (lo, hi) = extent_range(*anchor);
        if v < lo || v > hi {
            out.push(format!("MC2 {id}.{param}={v} from {anchor}"));
        }
    }
    if op == OpId::MO3 {
        anchors.series_used += m.nodes.len().abs_diff(parent.nodes.len());
        if anchors.series_used > anchors.series_budget {
            out.push(format!("MC3 {} series nodes over {}", anchors.series_used, anchors.series_budget));
        }
        let added: BTreeSet<&str> = m.nodes.keys().filter(|k| !parent.nodes.contains_key(*k)).map(|k| k.as_str()).collect();
        for id in &added {
            let kind = m.nodes[*id].kind;
            let neighbours = m.preds(id).into_iter().chain(m.succs(id));
            if neighbours.filter(|x| !added.contains(x)).any(|x| m.nodes[x].kind == kind) {
                out.push(format!("MC3 {id} next to a {kind:?}"));
            }
        }
    }
    if op == OpId::MO4 {
        for (id, n) in &m.nodes {
            let grew = n.kind.is_merge() && parent.nodes.contains_key(id) && m.preds(id).len() > parent.preds(id).len();
            if grew {
                let adds = anchors.branch_adds.entry(id.clone()).or_default();
                *adds += 1;
                if *adds > 2 {
                    out.push(format!("MC4 {adds} branches added at {id}"));
                }
            }
        }
    }
    if op == OpId::MO5 {
        for (id, n) in &m.nodes {
            let Some(pn) = parent.nodes.get(id).filter(|pn| pn.kind == n.kind) else { continue };
            for (param, v) in &n.params {
                if pn.params.get(param) != Some(v) && !table.layer_domain(n.kind, param).is_some_and(|d| d.contains(v.as_f64())) {
                    out.push(format!("MC5 {id}.{param}"));
                }
            }
        }
        if m.loss.kind == parent.loss.kind {
            for (param, v) in &m.loss.params {
                if parent.loss.params.get(param) != Some(v)
                    && !table.loss_domain(m.loss.kind, param).is_some_and(|d| d.contains(v.as_f64()))
                {
                    out.push(format!("MC5 {LOSS_SITE}.{param}"));
                }
            }
        }
        if m.optimizer.kind == parent.optimizer.kind {
            for (param, v) in &m.optimizer.params {
                if parent.optimizer.params.get(param) != Some(v)
                    && !table.optimizer_domain(param).is_some_and(|d| d.contains(v.as_f64()))
                {
                    out.push(format!("MC5 {OPTIMIZER_SITE}.{param}"));
                }
            }
        }
    }
    out
}

/// Whether `reason` is the right explanation for `op` failing on `parent`.
fn rejection_is_correct(op: OpId, reason: Rejection, parent: &Model, anchors: &Anchors, salt: u64) -> Result<(), String> {
    match reason {
        Rejection::StructuralCrash => Err("mutation itself crashed".into()),
        Rejection::NoApplicableSite => {
            for k in 1..=3u64 {
                let again = mutate::apply(op, parent, derive_indexed(salt, "recheck", k));
                if again.rejection != Some(Rejection::NoApplicableSite) {
                    return Err(format!("{op}: site appeared under another seed ({:?})", again.rejection));
                }
            }
            Ok(())
        }
        Rejection::ConstraintViolation(Constraint::MC3) if op == OpId::MO3 => {
            if anchors.series_used >= anchors.series_budget {
                Ok(())
            } else {
                // Budget remains, so every insertion must have clashed and no deletion fit.
                let deletions = mutate::mo3_series_delete(parent, &mut ChaCha8Rng::seed_from_u64(salt));
                match deletions.mutant {
                    None => Ok(()),
                    Some(_) => Err("MC3 with budget left and a deletion available".into()),
                }
            }
        }
        Rejection::ConstraintViolation(Constraint::MC4) if op == OpId::MO4 => {
            if anchors.merges_saturated(parent) {
                Ok(())
            } else {
                Err("MC4 without a saturated merge site".into())
            }
        }
        Rejection::ShapeInfeasible if !matches!(op, OpId::MO6 | OpId::MO7) => Ok(()),
        other => Err(format!("{op} cannot fail with {other}")),
    }
}

/// A planted out-of-range resize must be caught, or the sweep proves nothing.
fn checker_is_live() -> bool {
    let seed = builtin("lenet_small");
    let dense = seed.nodes.values().find(|n| extent_param(&seed, &n.id) == Some("units")).unwrap();
    let mut bad = seed.clone();
    let units = dense.int("units") as i64;
    bad.nodes.get_mut(&dense.id).unwrap().params.insert("units".into(), ParamValue::Int(4 * units + 1));
    !static_breaches(OpId::MO2, &seed, &bad, &mut Anchors::new(&seed)).is_empty()
}

fn constraint_soundness() -> Verdict {
    let live = checker_is_live();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut applications = 0usize;
    let mut mutated = 0usize;
    let mut breaches: Vec<String> = Vec::new();
    let mut wrong: Vec<String> = Vec::new();
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    let seeds = seeds::all_builtin();
    while applications < 10_000 {
        for seed in &seeds {
            let mut anchors = Anchors::new(seed);
            let mut cur = seed.clone();
            for _ in 0..40 {
                let op = OpId::ALL[rng.gen_range(0..7)];
                let salt = rng.gen::<u64>();
                let out = mutate::apply(op, &cur, salt);
                applications += 1;
                match (out.mutant, out.rejection) {
                    (Some(m), None) => {
                        mutated += 1;
                        let mut found = static_breaches(op, &cur, &m, &mut anchors);
                        found.extend(audit(&m));
                        if !validate_graph(&m).is_empty() {
                            found.push(format!("{op} produced an invalid graph"));
                        }
                        breaches.extend(found);
                        cur = m;
                    }
                    (None, Some(reason)) => {
                        *reasons.entry(reason.to_string()).or_default() += 1;
                        if let Err(e) = rejection_is_correct(op, reason, &cur, &anchors, salt) {
                            wrong.push(e);
                        }
                    }
                    _ => wrong.push(format!("{op}: outcome without exactly one of mutant and reason")),
                }
            }
        }
    }
    let shown = |v: &[String]| v.iter().take(3).cloned().collect::<Vec<_>>().join("; ");
    verdict(
        live && breaches.is_empty() && wrong.is_empty(),
        format!(
            "planted breach caught: {live}; {applications} applications, {mutated} mutants, {} static breaches, {} wrong reasons {reasons:?} {}{}",
            breaches.len(),
            wrong.len(),
            shown(&breaches),
            shown(&wrong)
        ),
    )
}

// ---------------------------------------------------------------- criteria 5, 6

fn calibration(shared: &mut Option<CampaignReport>) -> Verdict {
    let cfg = CampaignConfig::from_file(&configs_dir().join("default.toml")).unwrap();
    let rep = run_campaign(&cfg).unwrap();
    let v = verdict(
        rep.defects.is_empty() && rep.rounds.len() == 100,
        format!(
            "{} rounds on {}, legal rate {:.3}, {} defects",
            rep.rounds.len(),
            cfg.seed_model_path,
            rep.legal_rate,
            rep.defects.len()
        ),
    );
    *shared = Some(rep);
    v
}

/// Families each injected fault must surface as.
fn expected_families(fault: &str) -> &'static [&'static str] {
    match fault {
        "wrong-epsilon-in-norm" => &["accuracy-distance", "accuracy-outlier"],
        "skipped-gradient-term" => &["performance-loss"],
        "leaked-allocation-per-step" => &["resource-leak"],
        "quadratic-slowdown" => &["performance-efficiency"],
        "nan-on-extreme-input" => &["accuracy-outlier", "accuracy-distance"],
        "crash-on-kernel-gt-input" => &["crash-mutation", "crash-execution"],
        _ => &[],
    }
}

fn harness(cfg: &CampaignConfig, faults: &[String]) -> Harness {
    Harness::new(faults, cfg.oracles.clone(), cfg.dataset.clone(), cfg.train_steps, cfg.master_seed).unwrap()
}

/// Each fault is attributed when, armed alone, it raises one of its expected
/// families on a model the campaign flagged, and the fault-free harness does not.
fn recall() -> Verdict {
    let cfg = CampaignConfig::from_file(&configs_dir().join("all_faults.toml")).unwrap();
    let rep = run_campaign(&cfg).unwrap();
    let clean = harness(&cfg, &[]);
    let mut flagged: Vec<(&str, Stage)> = Vec::new();
    for d in &rep.defects {
        let key = (d.report.model_ref.hash.as_str(), d.stage);
        if !flagged.contains(&key) {
            flagged.push(key);
        }
    }
    let mut covered = Vec::new();
    let mut missed = Vec::new();
    for spec in faults::registry() {
        let families = expected_families(&spec.id);
        let alone = harness(&cfg, std::slice::from_ref(&spec.id));
        let fires = |r: &DefectReport| {
            families.contains(&r.defect_family.name())
                && (spec.id != "quadratic-slowdown" || r.trigger_value().is_some_and(|v| v > 3.0))
        };
        let hit = flagged.iter().any(|&(hash, stage)| {
            let model = &rep.models[hash];
            alone.run(stage, model).iter().any(fires) && !clean.run(stage, model).iter().any(fires)
        });
        if hit {
            covered.push(spec.id.clone());
        } else {
            missed.push(spec.id.clone());
        }
    }
    verdict(
        covered.len() >= 5 && rep.rounds.len() == 100,
        format!(
            "{} defects over {} models; {}/6 faults attributed by single-fault runs; missed: {}",
            rep.defects.len(),
            flagged.len(),
            covered.len(),
            if missed.is_empty() { "none".to_string() } else { missed.join(", ") }
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn ablation_direction() -> Verdict {
    let cfg = CampaignConfig::from_file(&configs_dir().join("default.toml")).unwrap();
    let rep = run_ablation(&cfg, &[Strategy::DoubleQ, Strategy::Random], 5).unwrap();
    let get = |s: Strategy| rep.summary.iter().find(|x| x.strategy == s).unwrap();
    let (dq, rnd) = (get(Strategy::DoubleQ), get(Strategy::Random));
    let rate_ok = dq.median_legal_rate >= rnd.median_legal_rate;
    let time_ok = rnd.mean_generation_ms_per_legal > dq.mean_generation_ms_per_legal;
    verdict(
        rate_ok && time_ok,
        format!(
            "median legal rate double-q {:.3} vs random {:.3} ({}); ms per legal model double-q {:.1} vs random {:.1} ({})",
            dq.median_legal_rate,
            rnd.median_legal_rate,
            if rate_ok { "ok" } else { "reversed" },
            dq.mean_generation_ms_per_legal,
            rnd.mean_generation_ms_per_legal,
            if time_ok { "ok" } else { "reversed" }
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn campaign_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_campaign"))
}

fn determinism_and_replay() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let config = configs_dir().join("all_faults.toml");
    let mut reports = Vec::new();
    for name in ["first", "second"] {
        let out = tmp.path().join(name);
        let status = campaign_bin()
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(status.status.code(), Some(2), "{}", String::from_utf8_lossy(&status.stderr));
        reports.push(std::fs::read(out.join("report.json")).unwrap());
    }
    let identical = reports[0] == reports[1];
    let report_path = tmp.path().join("first/report.json");
    let report = CampaignReport::from_json(std::str::from_utf8(&reports[0]).unwrap()).unwrap();
    let mut failed = Vec::new();
    for i in 0..report.defects.len() {
        let out = campaign_bin()
            .args(["replay", "--report"])
            .arg(&report_path)
            .args(["--defect", &i.to_string()])
            .output()
            .unwrap();
        if !out.status.success() {
            failed.push(i);
        }
    }
    verdict(
        identical && failed.is_empty() && !report.defects.is_empty(),
        format!(
            "reports identical: {identical} ({} bytes); {}/{} defects replayed within tolerance; failed: {failed:?}",
            reports[0].len(),
            report.defects.len() - failed.len(),
            report.defects.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn monotone(series: &[CoverageStats]) -> bool {
    series.windows(2).all(|w| w[1].lic >= w[0].lic && w[1].lpc >= w[0].lpc && w[1].lsc >= w[0].lsc)
}

fn coverage_properties(trajectory: Option<&[CoverageStats]>) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut models = Vec::new();
    for seed in seeds::all_builtin() {
        let mut cur = seed.clone();
        models.push(seed);
        for k in 0..40u64 {
            let op = OpId::ALL[rng.gen_range(0..7)];
            if let Some(m) = mutate::apply(op, &cur, k).mutant {
                models.push(m.clone());
                cur = m;
            }
        }
    }
    let whole = coverage(&models);
    let mut trajectory_ok = trajectory.is_none_or(monotone);
    let mut invariant = 0;
    for _ in 0..1000 {
        models.shuffle(&mut rng);
        let mut inc = Coverage::default();
        let mut path = Vec::with_capacity(models.len());
        for m in &models {
            inc.add(m);
            path.push(inc.stats());
        }
        trajectory_ok &= monotone(&path);
        if path.last() == Some(&whole) && coverage(&models) == whole {
            invariant += 1;
        }
    }
    verdict(
        trajectory_ok && invariant == 1000,
        format!(
            "{} models; monotone along campaign and shuffled trajectories: {trajectory_ok}; invariant {invariant}/1000; \
             final lic {:.3} lpc {:.3} lsc {:.3}",
            models.len(),
            whole.lic,
            whole.lpc,
            whole.lsc
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut calibration_report = None;
    let mut unexpected = Vec::new();
    let criteria: [(usize, &str, f64); 9] = [
        (1, "formula fidelity", 10.0),
        (2, "golden trace", 5.0),
        (3, "gradient soundness", 60.0),
        (4, "constraint soundness", 120.0),
        (5, "calibration", 600.0),
        (6, "recall under injected faults", 900.0),
        (7, "ablation direction", 5400.0),
        (8, "determinism and replay", 600.0),
        (9, "coverage monotonicity", 30.0),
    ];
    for (n, name, budget) in criteria {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let v = match n {
            1 => formula_fidelity(),
            2 => golden_trace(),
            3 => gradient_soundness(),
            4 => constraint_soundness(),
            5 => calibration(&mut calibration_report),
            6 => recall(),
            7 => ablation_direction(),
            8 => determinism_and_replay(),
            _ => coverage_properties(calibration_report.as_ref().map(|r| r.coverage.as_slice())),
        };
        let secs = t.elapsed().as_secs_f64();
        let pass = v.pass && secs < budget;
        let tag = match (pass, KNOWN_RED.contains(&n)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known red)",
            (false, false) => "FAIL",
        };
        println!("criterion {n} {name:<30} {tag:<17} {secs:>7.1}s / {budget:.0}s  {}", v.detail);
        if !pass && !KNOWN_RED.contains(&n) {
            unexpected.push(n);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}

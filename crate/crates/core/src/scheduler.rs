//! Operator and seed selection: double-Q learning with ε-greedy exploration,
//! UCB seed re-selection, and the random / Metropolis-Hastings baselines.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exec::{ExecutionTrace, TensorValue};
use crate::graph::{LayerKind, Model, OpId};
use crate::rng;

pub const FEATURES: usize = 22;

const DEPTH_SCALE: f64 = 32.0;
const WIDTH_SCALE: f64 = 512.0;
const PARAM_SCALE: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures(pub [f64; FEATURES]);

/// Depth, width, log parameter count, per-kind fractions, last operator
/// one-hot, remaining series budget; every entry in `[0, 1]`.
pub fn featurize(model: &Model) -> StateFeatures {
    let mut f = [0.0; FEATURES];
    let meta = model.compute_metadata();
    f[0] = (meta.depth as f64 / DEPTH_SCALE).min(1.0);
    f[1] = (meta.width as f64 / WIDTH_SCALE).min(1.0);
    f[2] = ((meta.param_count as f64).ln_1p() / PARAM_SCALE.ln_1p()).min(1.0);
    let n = model.nodes.len().max(1) as f64;
    for kind in LayerKind::ALL {
        f[3 + kind.index()] = model.count_kind(kind) as f64 / n;
    }
    if let Some(op) = model.lineage.last_op() {
        f[14 + op.index()] = 1.0;
    }
    let budget = model.lineage.series_budget();
    if budget > 0 {
        f[21] = model.lineage.series_remaining() as f64 / budget as f64;
    }
    StateFeatures(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    DoubleQ,
    Mcmc,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::DoubleQ, Strategy::Mcmc, Strategy::Random];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::DoubleQ => "double-q",
            Strategy::Mcmc => "mcmc",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected double-q, mcmc or random)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub ucb_c: f64,
    /// Metropolis-Hastings temperature.
    pub temperature: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            alpha: 0.1,
            gamma: 0.9,
            ucb_c: 1.0,
            temperature: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            (self.epsilon > 0.0 && self.epsilon < 1.0, "epsilon must lie in (0, 1)"),
            (self.alpha > 0.0 && self.alpha <= 1.0, "alpha must lie in (0, 1]"),
            (self.gamma >= 0.0 && self.gamma < 1.0, "gamma must lie in [0, 1)"),
            (self.ucb_c > 0.0, "ucb_c must be positive"),
            (self.temperature > 0.0, "temperature must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(msg.to_string()),
            None => Ok(()),
        }
    }
}

/// Linear action values: one bias plus weight vector per operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearQ {
    pub weights: Vec<[f64; FEATURES + 1]>,
}

impl LinearQ {
    pub fn zeros() -> Self {
        Self {
            weights: vec![[0.0; FEATURES + 1]; OpId::ALL.len()],
        }
    }

    pub fn random(seed: u64, label: &str) -> Self {
        let mut r = rng::stream(seed, label);
        let mut q = Self::zeros();
        for row in &mut q.weights {
            for w in row.iter_mut() {
                *w = r.gen_range(-0.01..0.01);
            }
        }
        q
    }

    pub fn value(&self, s: &StateFeatures, op: OpId) -> f64 {
        let w = &self.weights[op.index()];
        w[0] + w[1..].iter().zip(&s.0).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn values(&self, s: &StateFeatures) -> [f64; 7] {
        OpId::ALL.map(|op| self.value(s, op))
    }

    /// Normalized step: the estimate at `(s, op)` moves exactly `alpha` of
    /// the way toward `target`.
    pub fn step(&mut self, s: &StateFeatures, op: OpId, target: f64, alpha: f64) {
        let delta = target - self.value(s, op);
        let norm = 1.0 + s.0.iter().map(|x| x * x).sum::<f64>();
        let g = alpha * delta / norm;
        let w = &mut self.weights[op.index()];
        w[0] += g;
        for (wi, xi) in w[1..].iter_mut().zip(&s.0) {
            *wi += g * xi;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in &mut self.weights {
            for w in row.iter_mut() {
                *w *= factor;
            }
        }
    }
}

/// Lowest-index operator among the maxima.
pub fn argmax(values: &[f64; 7]) -> OpId {
    let mut best = 0;
    for i in 1..7 {
        if values[i] > values[best] {
            best = i;
        }
    }
    OpId::ALL[best]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    Q1,
    Q2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QPair {
    pub q1: LinearQ,
    pub q2: LinearQ,
}

impl QPair {
    pub fn new(seed: u64) -> Self {
        Self {
            q1: LinearQ::random(seed, "q/q1"),
            q2: LinearQ::random(seed, "q/q2"),
        }
    }

    pub fn mean_values(&self, s: &StateFeatures) -> [f64; 7] {
        let a = self.q1.values(s);
        let b = self.q2.values(s);
        std::array::from_fn(|i| (a[i] + b[i]) / 2.0)
    }

    /// Hash of the current weights, for per-round records.
    pub fn snapshot_hash(&self) -> String {
        let mut h = Sha256::new();
        for row in self.q1.weights.iter().chain(&self.q2.weights) {
            for w in row {
                h.update(w.to_le_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

pub fn select_operator(q: &QPair, state: &StateFeatures, epsilon: f64, rng: &mut impl Rng) -> OpId {
    if rng.gen::<f64>() <= epsilon {
        random_select(rng)
    } else {
        argmax(&q.mean_values(state))
    }
}

pub fn random_select(rng: &mut impl Rng) -> OpId {
    OpId::ALL[rng.gen_range(0..OpId::ALL.len())]
}

/// Update the chosen estimator toward `r + γ·other(d', argmax own(d'))`.
pub fn update_estimator(
    q: &mut QPair,
    which: Estimator,
    d: &StateFeatures,
    s: OpId,
    r: f64,
    d_next: &StateFeatures,
    hp: &Hyperparams,
) {
    let (own, other) = match which {
        Estimator::Q1 => (&mut q.q1, &q.q2),
        Estimator::Q2 => (&mut q.q2, &q.q1),
    };
    let s_next = argmax(&own.values(d_next));
    let target = r + hp.gamma * other.value(d_next, s_next);
    own.step(d, s, target, hp.alpha);
}

/// Coin flip picks which estimator learns; returns it.
pub fn update_double_q(
    q: &mut QPair,
    d: &StateFeatures,
    s: OpId,
    r: f64,
    d_next: &StateFeatures,
    hp: &Hyperparams,
    rng: &mut impl Rng,
) -> Estimator {
    let which = if rng.gen::<f64>() <= 0.5 { Estimator::Q1 } else { Estimator::Q2 };
    update_estimator(q, which, d, s, r, d_next, hp);
    which
}

/// Mean absolute elementwise difference; `None` when specs differ or either
/// side holds a non-finite value.
pub fn mean_abs_distance(a: &TensorValue, b: &TensorValue) -> Option<f64> {
    if a.spec != b.spec || a.data.is_empty() || a.has_non_finite() || b.has_non_finite() {
        return None;
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Some(sum / a.data.len() as f64)
}

/// Distance between final-layer outputs, or `penalty` when undefined.
pub fn reward(seed_trace: &ExecutionTrace, mutant_trace: &ExecutionTrace, penalty: f64) -> f64 {
    match (seed_trace.final_output(), mutant_trace.final_output()) {
        (Some(a), Some(b)) => mean_abs_distance(a, b).unwrap_or(penalty),
        _ => penalty,
    }
}

/// `r + c·sqrt(ln(select_num) / snum)`, infinite for an untried operator.
pub fn ucb(r: f64, select_num: u64, snum: u64, c: f64) -> f64 {
    if snum == 0 {
        return f64::INFINITY;
    }
    r + c * ((select_num as f64).ln() / snum as f64).sqrt()
}

pub fn ucb_score(candidate: &Model, op: OpId, c: f64) -> f64 {
    let l = &candidate.lineage;
    ucb(l.reward, l.select_num, l.snums[op.index()], c)
}

/// Index of the highest-scoring pool member; earliest wins ties.
pub fn select_seed_ucb(pool: &[Model], op: OpId, c: f64) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, m) in pool.iter().enumerate() {
        let s = ucb_score(m, op, c);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

pub fn mh_acceptance(r_new: f64, r_old: f64, temperature: f64) -> f64 {
    ((r_new - r_old) / temperature).exp().min(1.0)
}

/// Metropolis-Hastings walk over operators with a uniform proposal, scored by
/// each operator's last observed reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mcmc {
    pub current: OpId,
    pub last_reward: [f64; 7],
    pub temperature: f64,
}

impl Mcmc {
    pub fn new(temperature: f64) -> Self {
        Self {
            current: OpId::MO1,
            last_reward: [0.0; 7],
            temperature,
        }
    }

    pub fn mcmc_select(&mut self, rng: &mut impl Rng) -> OpId {
        let proposal = random_select(rng);
        let a = mh_acceptance(
            self.last_reward[proposal.index()],
            self.last_reward[self.current.index()],
            self.temperature,
        );
        if rng.gen::<f64>() < a {
            self.current = proposal;
        }
        self.current
    }

    pub fn observe(&mut self, op: OpId, r: f64) {
        self.last_reward[op.index()] = r;
    }
}

/// Metropolis-Hastings step over pool members scored by stored reward.
pub fn mcmc_seed(pool: &[Model], current: usize, temperature: f64, rng: &mut impl Rng) -> usize {
    let proposal = rng.gen_range(0..pool.len());
    let current = current.min(pool.len() - 1);
    let a = mh_acceptance(pool[proposal].lineage.reward, pool[current].lineage.reward, temperature);
    if rng.gen::<f64>() < a {
        proposal
    } else {
        current
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::BackendId;
    use crate::graph::{DType, TensorSpec};
    use crate::mutate::series_insert;
    use crate::seeds;

    fn chi_square_uniform(counts: &[u64; 7]) -> f64 {
        let n: u64 = counts.iter().sum();
        let e = n as f64 / 7.0;
        counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
    }

    // 6 degrees of freedom, p = 0.01.
    const CHI2_CRIT: f64 = 16.812;

    #[test]
    fn features_are_bounded_and_fixed_length() {
        for m in seeds::all_builtin() {
            let f = featurize(&m);
            assert_eq!(f.0.len(), 22);
            assert!(f.0.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
            assert_eq!(f, featurize(&m.clone()));
        }
    }

    #[test]
    fn series_growth_changes_only_structural_entries() {
        let mut text = String::from("input f32[2,8]\n");
        for i in 0..4 {
            text.push_str(&format!("layer d{i} Dense units=8\nlayer s{i} Sigmoid\n"));
        }
        text.push_str("layer d4 Dense units=8\nlayer o Dense units=3\n");
        let m = seeds::load_seed("ten", &text).unwrap();
        let mut grown = series_insert(&m, Some("d0"), "relu").unwrap();
        grown = series_insert(&grown, Some("d1"), "relu").unwrap();
        grown.lineage.mutation_history.push(OpId::MO3);
        assert_eq!(grown.metadata.depth, 12);
        let (a, b) = (featurize(&m), featurize(&grown));
        let changed: Vec<usize> = (0..FEATURES).filter(|&i| a.0[i] != b.0[i]).collect();
        let allowed = |i: usize| i == 0 || (3..14).contains(&i) || (14..21).contains(&i) || i == 21;
        assert!(changed.iter().all(|&i| allowed(i)), "{changed:?}");
        assert!(changed.contains(&0) && changed.contains(&21));
    }

    #[test]
    fn greedy_choice_and_tie_rule() {
        let s = featurize(&seeds::builtin("lenet_small").unwrap());
        let mut q = QPair {
            q1: LinearQ::zeros(),
            q2: LinearQ::zeros(),
        };
        let mut r = rng::stream(0, "t");
        q.q1.weights[OpId::MO3.index()][0] = 1.0;
        for _ in 0..100 {
            assert_eq!(select_operator(&q, &s, 0.0, &mut r), OpId::MO3);
        }
        q.q1.weights[OpId::MO3.index()][0] = 0.0;
        q.q1.weights[OpId::MO2.index()][0] = 0.5;
        q.q2.weights[OpId::MO5.index()][0] = 0.5;
        q.q1.weights[OpId::MO5.index()][0] = 0.0;
        q.q2.weights[OpId::MO2.index()][0] = 0.0;
        assert_eq!(select_operator(&q, &s, 0.0, &mut r), OpId::MO2);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let s = featurize(&seeds::builtin("lenet_small").unwrap());
        let q = QPair::new(1);
        let mut r = rng::stream(2, "t");
        let mut counts = [0u64; 7];
        for _ in 0..10_000 {
            counts[select_operator(&q, &s, 1.0, &mut r).index()] += 1;
        }
        assert!(chi_square_uniform(&counts) < CHI2_CRIT, "{counts:?}");
        let mut counts = [0u64; 7];
        for _ in 0..10_000 {
            counts[random_select(&mut r).index()] += 1;
        }
        assert!(chi_square_uniform(&counts) < CHI2_CRIT, "{counts:?}");
    }

    #[test]
    fn greedy_choice_is_scale_invariant() {
        let s = featurize(&seeds::builtin("vgg_small").unwrap());
        let q = QPair::new(5);
        let mut scaled = q.clone();
        scaled.q1.scale(3.7);
        scaled.q2.scale(3.7);
        assert_eq!(argmax(&q.mean_values(&s)), argmax(&scaled.mean_values(&s)));
    }

    #[test]
    fn hand_evaluated_update() {
        let d = featurize(&seeds::builtin("lenet_small").unwrap());
        let d2 = featurize(&seeds::builtin("vgg_small").unwrap());
        let hp = Hyperparams::default();
        let mut q = QPair {
            q1: LinearQ::zeros(),
            q2: LinearQ::zeros(),
        };
        update_estimator(&mut q, Estimator::Q1, &d, OpId::MO4, 1.0, &d2, &hp);
        assert!((q.q1.value(&d, OpId::MO4) - 0.1).abs() < 1e-12);
        assert_eq!(q.q2, LinearQ::zeros());

        let before = q.clone();
        let frozen = Hyperparams {
            alpha: 0.0,
            ..hp.clone()
        };
        update_estimator(&mut q, Estimator::Q2, &d, OpId::MO4, 1.0, &d2, &frozen);
        update_estimator(&mut q, Estimator::Q1, &d, OpId::MO4, 1.0, &d2, &frozen);
        assert_eq!(q, before);

        update_estimator(&mut q, Estimator::Q2, &d, OpId::MO1, 0.5, &d2, &hp);
        assert_eq!(q.q1, before.q1);
        assert_ne!(q.q2, before.q2);
    }

    #[test]
    fn random_update_touches_one_estimator() {
        let d = featurize(&seeds::builtin("lenet_small").unwrap());
        let hp = Hyperparams::default();
        let mut r = rng::stream(4, "t");
        let mut q = QPair::new(9);
        let mut seen = [false; 2];
        for _ in 0..50 {
            let before = q.clone();
            let which = update_double_q(&mut q, &d, OpId::MO2, 1.0, &d, &hp, &mut r);
            match which {
                Estimator::Q1 => assert_eq!(q.q2, before.q2),
                Estimator::Q2 => assert_eq!(q.q1, before.q1),
            }
            seen[which as usize] = true;
        }
        assert_eq!(seen, [true, true]);
    }

    fn out(data: &[f64]) -> ExecutionTrace {
        let m = seeds::builtin("mlp_regression").unwrap();
        let mut t = ExecutionTrace::empty(BackendId::A, &m);
        let spec = TensorSpec::new(DType::F32, vec![1, data.len()]);
        t.per_layer_outputs.insert(t.output_node.clone(), TensorValue::new(spec, data.to_vec()));
        t
    }

    #[test]
    fn reward_is_mean_abs_distance() {
        assert_eq!(reward(&out(&[1.0, 2.0, 3.0]), &out(&[1.0, 2.0, 3.0]), -1.0), 0.0);
        assert_eq!(reward(&out(&[1.0, 2.0, 3.0]), &out(&[2.0, 2.0, 5.0]), -1.0), 1.0);
        assert_eq!(reward(&out(&[1.0, f64::NAN]), &out(&[1.0, 2.0]), -1.0), -1.0);
        assert_eq!(reward(&out(&[1.0]), &out(&[1.0, 2.0]), -1.0), -1.0);
    }

    #[test]
    fn ucb_values() {
        assert_eq!(ucb(0.0, 1, 1, 1.0), 0.0);
        assert!((ucb(0.5, 4, 2, 1.0) - 1.332_55).abs() < 1e-4);
        assert_eq!(ucb(0.5, 4, 0, 1.0), f64::INFINITY);
        assert!(ucb(0.5, 10, 2, 1.0) > ucb(0.5, 10, 3, 1.0));
    }

    #[test]
    fn ucb_seed_choice() {
        let base = seeds::builtin("lenet_small").unwrap();
        let mut pool = vec![base.clone(), base.clone(), base.clone()];
        for (i, m) in pool.iter_mut().enumerate() {
            m.lineage.select_num = 4;
            m.lineage.snums = [1; 7];
            m.lineage.reward = 0.1 * i as f64;
        }
        assert_eq!(select_seed_ucb(&pool[..1], OpId::MO1, 1.0), 0);
        assert_eq!(select_seed_ucb(&pool, OpId::MO1, 1.0), 2);
        pool[0].lineage.snums[OpId::MO1.index()] = 0;
        assert_eq!(select_seed_ucb(&pool, OpId::MO1, 1.0), 0);
        pool[0].lineage.snums[OpId::MO1.index()] = 1;
        pool[2].lineage.reward = 0.0;
        assert_eq!(select_seed_ucb(&pool, OpId::MO1, 1.0), 1);
    }

    #[test]
    fn mh_acceptance_rates() {
        assert_eq!(mh_acceptance(0.3, 0.3, 1.0), 1.0);
        let mut r = rng::stream(8, "t");
        let a = mh_acceptance(0.0, 0.5, 0.5);
        let accepted = (0..10_000).filter(|_| r.gen::<f64>() < a).count();
        assert!((accepted as f64 / 1e4 - (-1.0f64).exp()).abs() < 0.02);

        let mut walk = Mcmc::new(1.0);
        for op in OpId::ALL {
            walk.observe(op, 0.0);
        }
        let mut counts = [0u64; 7];
        let mut r = rng::stream(9, "t");
        for _ in 0..10_000 {
            counts[walk.mcmc_select(&mut r).index()] += 1;
        }
        assert!(chi_square_uniform(&counts) < CHI2_CRIT, "{counts:?}");
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>(), Ok(s));
        }
        assert!("greedy".parse::<Strategy>().is_err());
        assert!(Hyperparams::default().validate().is_ok());
        assert!(Hyperparams {
            epsilon: 1.0,
            ..Hyperparams::default()
        }
        .validate()
        .is_err());
    }
}

//! Differential defect oracles over pairs of execution traces.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{BackendId, Crash, ExecutionTrace, Phase};
use crate::scheduler::mean_abs_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectFamily {
    PerformanceLoss,
    PerformanceEfficiency,
    PerformanceEval,
    ResourceLeak,
    ResourceMax,
    ResourceSimilarity,
    AccuracyDistance,
    AccuracyOutlier,
    CrashMutation,
    CrashExecution,
}

impl DefectFamily {
    pub const ALL: [DefectFamily; 10] = [
        DefectFamily::PerformanceLoss,
        DefectFamily::PerformanceEfficiency,
        DefectFamily::PerformanceEval,
        DefectFamily::ResourceLeak,
        DefectFamily::ResourceMax,
        DefectFamily::ResourceSimilarity,
        DefectFamily::AccuracyDistance,
        DefectFamily::AccuracyOutlier,
        DefectFamily::CrashMutation,
        DefectFamily::CrashExecution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectFamily::PerformanceLoss => "performance-loss",
            DefectFamily::PerformanceEfficiency => "performance-efficiency",
            DefectFamily::PerformanceEval => "performance-eval",
            DefectFamily::ResourceLeak => "resource-leak",
            DefectFamily::ResourceMax => "resource-max",
            DefectFamily::ResourceSimilarity => "resource-similarity",
            DefectFamily::AccuracyDistance => "accuracy-distance",
            DefectFamily::AccuracyOutlier => "accuracy-outlier",
            DefectFamily::CrashMutation => "crash-mutation",
            DefectFamily::CrashExecution => "crash-execution",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

impl fmt::Display for DefectFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Lifecycle phase in which a defect was observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectPhase {
    Mutation,
    Training,
    Inference,
}

impl DefectPhase {
    /// Phase of a crash raised while running `context`.
    pub fn of_crash(crash: &Crash, context: DefectPhase) -> DefectPhase {
        match (context, crash.phase) {
            (DefectPhase::Mutation, _) => DefectPhase::Mutation,
            (_, Phase::Inference) => DefectPhase::Inference,
            (_, Phase::Mutation) => DefectPhase::Mutation,
            (c, _) => c,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelRef {
    pub hash: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub defect_family: DefectFamily,
    pub model_ref: ModelRef,
    /// Name of the measurement that crossed its threshold.
    pub trigger: String,
    #[serde(with = "crate::jsonfloat::map")]
    pub measurements: BTreeMap<String, f64>,
    #[serde(with = "crate::jsonfloat::map")]
    pub thresholds: BTreeMap<String, f64>,
    pub backend_pair: (BackendId, BackendId),
    pub phase: DefectPhase,
    /// Faults armed on backend B whose trigger held for the model.
    pub active_faults: Vec<String>,
}

impl DefectReport {
    fn new(family: DefectFamily, phase: DefectPhase, trigger: &str) -> Self {
        Self {
            defect_family: family,
            model_ref: ModelRef::default(),
            trigger: trigger.to_string(),
            measurements: BTreeMap::new(),
            thresholds: BTreeMap::new(),
            backend_pair: (BackendId::A, BackendId::B),
            phase,
            active_faults: Vec::new(),
        }
    }

    fn measure(mut self, name: &str, v: f64) -> Self {
        self.measurements.insert(name.to_string(), v);
        self
    }

    fn threshold(mut self, name: &str, v: f64) -> Self {
        self.thresholds.insert(name.to_string(), v);
        self
    }

    pub fn trigger_value(&self) -> Option<f64> {
        self.measurements.get(&self.trigger).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleThresholds {
    pub dtw_threshold: f64,
    /// Normalization range floor, relative to the largest loss magnitude.
    pub dtw_range_floor: f64,
    pub time_ratio: f64,
    pub eval_delta: f64,
    /// Bytes per step.
    pub leak_slope: f64,
    pub leak_warmup: usize,
    pub mem_cap: f64,
    pub mem_cos: f64,
    pub out_dist: f64,
}

impl Default for OracleThresholds {
    fn default() -> Self {
        Self {
            dtw_threshold: 0.5,
            dtw_range_floor: 0.05,
            time_ratio: 3.0,
            eval_delta: 0.05,
            leak_slope: 64.0,
            leak_warmup: 2,
            mem_cap: 256.0 * 1024.0 * 1024.0,
            mem_cos: 0.98,
            out_dist: 1e-3,
        }
    }
}

impl OracleThresholds {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("dtw_threshold", self.dtw_threshold),
            ("dtw_range_floor", self.dtw_range_floor),
            ("time_ratio", self.time_ratio),
            ("eval_delta", self.eval_delta),
            ("leak_slope", self.leak_slope),
            ("mem_cap", self.mem_cap),
            ("mem_cos", self.mem_cos),
            ("out_dist", self.out_dist),
        ];
        match positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            Some((k, _)) => Err(format!("threshold `{k}` must be positive")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DtwError {
    #[error("series must be non-empty")]
    Empty,
    #[error("series contains a non-finite value")]
    NonFinite,
}

/// Dynamic time warping with absolute-difference cost.
pub fn dtw_distance(x: &[f64], y: &[f64]) -> Result<f64, DtwError> {
    if x.is_empty() || y.is_empty() {
        return Err(DtwError::Empty);
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(DtwError::NonFinite);
    }
    let m = y.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for xi in x {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = (xi - y[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Joint min-max normalization of two series; the range is floored at
/// `floor` times the largest magnitude so flat curves do not amplify noise.
pub fn normalize_pair(a: &[f64], b: &[f64], floor: f64) -> (Vec<f64>, Vec<f64>) {
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let mag = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let range = (hi - lo).max(floor * mag).max(f64::MIN_POSITIVE);
    let f = |s: &[f64]| s.iter().map(|v| (v - lo) / range).collect();
    (f(a), f(b))
}

fn non_finite(series: &[f64]) -> usize {
    series.iter().filter(|v| !v.is_finite()).count()
}

pub fn detect_loss_defect(a: &ExecutionTrace, b: &ExecutionTrace, cfg: &OracleThresholds) -> Vec<DefectReport> {
    let (na, nb) = (non_finite(&a.loss_series), non_finite(&b.loss_series));
    let base = |trigger| {
        DefectReport::new(DefectFamily::PerformanceLoss, DefectPhase::Training, trigger)
            .measure("non_finite_a", na as f64)
            .measure("non_finite_b", nb as f64)
    };
    if (na == 0) != (nb == 0) {
        let first = if na > 0 { &a.loss_series } else { &b.loss_series };
        let step = first.iter().position(|v| !v.is_finite()).unwrap_or(0);
        let side = if na > 0 { "non_finite_a" } else { "non_finite_b" };
        return vec![base(side).measure("first_non_finite_step", step as f64)];
    }
    if na > 0 || a.loss_series.is_empty() || b.loss_series.is_empty() {
        return Vec::new();
    }
    let (x, y) = normalize_pair(&a.loss_series, &b.loss_series, cfg.dtw_range_floor);
    match dtw_distance(&x, &y) {
        Ok(d) if d > cfg.dtw_threshold => vec![base("dtw")
            .measure("dtw", d)
            .threshold("dtw_threshold", cfg.dtw_threshold)
            .threshold("dtw_range_floor", cfg.dtw_range_floor)],
        _ => Vec::new(),
    }
}

pub fn detect_efficiency_defect(
    a: &ExecutionTrace,
    b: &ExecutionTrace,
    cfg: &OracleThresholds,
    phase: DefectPhase,
) -> Option<DefectReport> {
    let (ta, tb) = (a.total_time(), b.total_time());
    if a.step_times.is_empty() || b.step_times.is_empty() || ta.min(tb) <= 0.0 {
        return None;
    }
    let ratio = ta.max(tb) / ta.min(tb);
    (ratio > cfg.time_ratio).then(|| {
        DefectReport::new(DefectFamily::PerformanceEfficiency, phase, "ratio")
            .measure("ratio", ratio)
            .measure("time_a_ms", ta)
            .measure("time_b_ms", tb)
            .threshold("time_ratio", cfg.time_ratio)
    })
}

pub fn detect_eval_defect(a: &ExecutionTrace, b: &ExecutionTrace, cfg: &OracleThresholds) -> Option<DefectReport> {
    let (ea, eb) = (a.eval_metric?, b.eval_metric?);
    let delta = (ea - eb).abs();
    (delta > cfg.eval_delta).then(|| {
        DefectReport::new(DefectFamily::PerformanceEval, DefectPhase::Inference, "delta")
            .measure("delta", delta)
            .measure("eval_a", ea)
            .measure("eval_b", eb)
            .threshold("eval_delta", cfg.eval_delta)
    })
}

/// Least-squares slope of `series[warmup..]` against step index.
pub fn linear_slope(series: &[u64], warmup: usize) -> f64 {
    let ys: Vec<f64> = series.iter().skip(warmup).map(|&v| v as f64).collect();
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Exactly 1 for identical series.
pub fn cosine_similarity(a: &[u64], b: &[u64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).min(1.0)
}

pub fn detect_resource_defect(
    a: &ExecutionTrace,
    b: &ExecutionTrace,
    cfg: &OracleThresholds,
    phase: DefectPhase,
) -> Vec<DefectReport> {
    let mut out = Vec::new();
    if a.mem_series.is_empty() || b.mem_series.is_empty() {
        return out;
    }
    let (sa, sb) = (linear_slope(&a.mem_series, cfg.leak_warmup), linear_slope(&b.mem_series, cfg.leak_warmup));
    if (sa > cfg.leak_slope) != (sb > cfg.leak_slope) {
        out.push(
            DefectReport::new(DefectFamily::ResourceLeak, phase, if sa > sb { "slope_a" } else { "slope_b" })
                .measure("slope_a", sa)
                .measure("slope_b", sb)
                .threshold("leak_slope", cfg.leak_slope)
                .threshold("leak_warmup", cfg.leak_warmup as f64),
        );
    }
    let (pa, pb) = (a.peak_memory() as f64, b.peak_memory() as f64);
    if pa.max(pb) > cfg.mem_cap {
        out.push(
            DefectReport::new(DefectFamily::ResourceMax, phase, if pa > pb { "peak_a" } else { "peak_b" })
                .measure("peak_a", pa)
                .measure("peak_b", pb)
                .threshold("mem_cap", cfg.mem_cap),
        );
    }
    let cos = cosine_similarity(&a.mem_series, &b.mem_series);
    if cos < cfg.mem_cos {
        out.push(
            DefectReport::new(DefectFamily::ResourceSimilarity, phase, "cosine")
                .measure("cosine", cos)
                .threshold("mem_cos", cfg.mem_cos),
        );
    }
    out
}

pub fn detect_accuracy_defect(
    a: &ExecutionTrace,
    b: &ExecutionTrace,
    cfg: &OracleThresholds,
    phase: DefectPhase,
) -> Vec<DefectReport> {
    let (Some(oa), Some(ob)) = (a.final_output(), b.final_output()) else {
        return Vec::new();
    };
    let mask = |t: &crate::exec::TensorValue| t.data.iter().map(|v| !v.is_finite()).collect::<Vec<_>>();
    let (ma, mb) = (mask(oa), mask(ob));
    let (ca, cb) = (ma.iter().filter(|x| **x).count(), mb.iter().filter(|x| **x).count());
    if ma != mb {
        let differing = ma.iter().zip(&mb).filter(|(x, y)| x != y).count().max(ca.abs_diff(cb));
        return vec![DefectReport::new(DefectFamily::AccuracyOutlier, phase, "differing_outliers")
            .measure("differing_outliers", differing as f64)
            .measure("non_finite_a", ca as f64)
            .measure("non_finite_b", cb as f64)];
    }
    match mean_abs_distance(oa, ob) {
        Some(d) if d > cfg.out_dist => vec![DefectReport::new(DefectFamily::AccuracyDistance, phase, "distance")
            .measure("distance", d)
            .measure("max_abs_diff", oa.max_abs_diff(ob))
            .threshold("out_dist", cfg.out_dist)],
        _ => Vec::new(),
    }
}

/// A report iff exactly one backend crashed.
pub fn detect_crash_defect(a: Option<&Crash>, b: Option<&Crash>, phase: DefectPhase) -> Option<DefectReport> {
    let crashed = match (a, b) {
        (Some(c), None) => ("crashed_a", c),
        (None, Some(c)) => ("crashed_b", c),
        _ => return None,
    };
    let phase = DefectPhase::of_crash(crashed.1, phase);
    let family = if phase == DefectPhase::Mutation {
        DefectFamily::CrashMutation
    } else {
        DefectFamily::CrashExecution
    };
    Some(
        DefectReport::new(family, phase, crashed.0)
            .measure("crashed_a", f64::from(u8::from(a.is_some())))
            .measure("crashed_b", f64::from(u8::from(b.is_some()))),
    )
}

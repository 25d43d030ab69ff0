//! Filter constraints MC7–MC9: probe a mutant on the reference backend and
//! decide whether it is legal.

use serde::{Deserialize, Serialize};

use crate::exec::{probe_input, BackendId, Crash, Dataset, DatasetConfig, ExecutionTrace, Executor};
use crate::graph::{DType, Model};
use crate::mutate::{Constraint, Rejection};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LegalityThresholds {
    /// Mutant inference time may not exceed this multiple of the seed's.
    pub time_ratio: f64,
    pub grad_high: f64,
    pub grad_low: f64,
    pub f16_bound: f64,
    pub f32_bound: f64,
    pub f64_bound: f64,
}

impl Default for LegalityThresholds {
    fn default() -> Self {
        Self {
            time_ratio: 3.0,
            grad_high: 1e2,
            grad_low: 1e-3,
            f16_bound: DType::F16.max_finite(),
            f32_bound: DType::F32.max_finite(),
            f64_bound: DType::F64.max_finite(),
        }
    }
}

impl LegalityThresholds {
    pub fn bound(&self, dtype: DType) -> f64 {
        match dtype {
            DType::F16 => self.f16_bound,
            DType::F32 => self.f32_bound,
            DType::F64 => self.f64_bound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    #[serde(with = "crate::jsonfloat")]
    pub measurement: f64,
    pub threshold: f64,
}

/// MC7 cannot be decided when either probe crashed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Indeterminate;

#[derive(Debug, Clone, PartialEq)]
pub struct LegalityVerdict {
    pub legal: bool,
    pub violations: Vec<Violation>,
    /// A probe crash makes the mutant illegal without naming a constraint.
    pub crash: Option<Crash>,
    /// Mutant inference probe, mutant one-step training probe, seed inference probe.
    pub probe: Vec<ExecutionTrace>,
}

impl LegalityVerdict {
    pub fn rejection(&self) -> Option<Rejection> {
        if self.crash.is_some() {
            return Some(Rejection::StructuralCrash);
        }
        self.violations.first().map(|v| Rejection::ConstraintViolation(v.constraint))
    }
}

pub fn check_mc7_time(
    mutant: &ExecutionTrace,
    seed: &ExecutionTrace,
    ratio: f64,
) -> Result<Option<Violation>, Indeterminate> {
    if mutant.crash.is_some() || seed.crash.is_some() || mutant.step_times.is_empty() || seed.step_times.is_empty() {
        return Err(Indeterminate);
    }
    let measured = mutant.total_time() / seed.total_time().max(f64::MIN_POSITIVE);
    Ok((measured > ratio).then_some(Violation {
        constraint: Constraint::MC7,
        measurement: measured,
        threshold: ratio,
    }))
}

/// Non-finite outputs measure as infinity.
pub fn check_mc8_accuracy(trace: &ExecutionTrace, bound: f64) -> Option<Violation> {
    let out = trace.final_output()?;
    let measured = if out.has_non_finite() { f64::INFINITY } else { out.max_abs() };
    (measured > bound).then_some(Violation {
        constraint: Constraint::MC8,
        measurement: measured,
        threshold: bound,
    })
}

/// Max-abs over every parameter gradient, outside `[low, high]`.
pub fn check_mc9_gradient(trace: &ExecutionTrace, low: f64, high: f64) -> Option<Violation> {
    let g = trace.max_abs_gradient()?;
    if g > high {
        Some(Violation {
            constraint: Constraint::MC9,
            measurement: g,
            threshold: high,
        })
    } else if g < low {
        Some(Violation {
            constraint: Constraint::MC9,
            measurement: g,
            threshold: low,
        })
    } else {
        None
    }
}

/// Seeds for the probe runs; fixed per campaign so verdicts are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub seed: u64,
    pub thresholds: LegalityThresholds,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            thresholds: LegalityThresholds::default(),
        }
    }
}

impl ProbeConfig {
    fn dataset(&self, model: &Model) -> Dataset {
        let n = model.input_spec.batch();
        Dataset::for_model(
            model,
            &DatasetConfig {
                train_samples: n,
                eval_samples: n,
                seed: rng::derive_seed(self.seed, "probe/data"),
            },
        )
    }

    fn init_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "probe/init")
    }

    /// Inference probe on the fixed probe batch.
    pub fn infer(&self, model: &Model) -> ExecutionTrace {
        let x = probe_input(&model.input_spec, rng::derive_seed(self.seed, "probe/input"));
        Executor::new(BackendId::A).forward(model, &x, self.init_seed())
    }

    /// One training step, for the gradient summary.
    pub fn train_step(&self, model: &Model) -> ExecutionTrace {
        Executor::new(BackendId::A).train(model, &self.dataset(model), 1, self.init_seed()).0
    }
}

/// Decide legality given a precomputed seed inference probe.
pub fn judge_against(mutant: &Model, seed_probe: &ExecutionTrace, cfg: &ProbeConfig) -> LegalityVerdict {
    let t = &cfg.thresholds;
    let infer = cfg.infer(mutant);
    let train = cfg.train_step(mutant);
    let crash = infer.crash.clone().or_else(|| train.crash.clone());
    let mut violations = Vec::new();
    if crash.is_none() {
        if let Ok(Some(v)) = check_mc7_time(&infer, seed_probe, t.time_ratio) {
            violations.push(v);
        }
        violations.extend(check_mc8_accuracy(&infer, t.bound(mutant.dtype())));
        violations.extend(check_mc9_gradient(&train, t.grad_low, t.grad_high));
    }
    LegalityVerdict {
        legal: crash.is_none() && violations.is_empty(),
        violations,
        crash,
        probe: vec![infer, train, seed_probe.clone()],
    }
}

pub fn judge(mutant: &Model, seed: &Model, cfg: &ProbeConfig) -> LegalityVerdict {
    judge_against(mutant, &cfg.infer(seed), cfg)
}

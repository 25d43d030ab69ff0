//! Fault registry for the lowered backend.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::graph::{infer_shapes, input_specs, LayerKind, Model};

const REGISTRY: &str = include_str!("../../data/faults.toml");

/// Sigmoid inputs at or beyond this magnitude produce NaN under the fault.
pub const NAN_INPUT_THRESHOLD: f64 = 3.0;
/// BatchNorm epsilon multiplier under the fault.
pub const EPSILON_FACTOR: f64 = 1e4;
/// Minimum depth at which the slowdown fault engages.
pub const SLOWDOWN_MIN_DEPTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultEffect {
    WrongEpsilonInNorm,
    SkippedGradientTerm,
    LeakedAllocationPerStep,
    QuadraticSlowdown,
    NanOnExtremeInput,
    CrashOnKernelGtInput,
}

impl FaultEffect {
    pub const ALL: [FaultEffect; 6] = [
        FaultEffect::WrongEpsilonInNorm,
        FaultEffect::SkippedGradientTerm,
        FaultEffect::LeakedAllocationPerStep,
        FaultEffect::QuadraticSlowdown,
        FaultEffect::NanOnExtremeInput,
        FaultEffect::CrashOnKernelGtInput,
    ];

    pub fn id(self) -> &'static str {
        match self {
            FaultEffect::WrongEpsilonInNorm => "wrong-epsilon-in-norm",
            FaultEffect::SkippedGradientTerm => "skipped-gradient-term",
            FaultEffect::LeakedAllocationPerStep => "leaked-allocation-per-step",
            FaultEffect::QuadraticSlowdown => "quadratic-slowdown",
            FaultEffect::NanOnExtremeInput => "nan-on-extreme-input",
            FaultEffect::CrashOnKernelGtInput => "crash-on-kernel-gt-input",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|e| e.id() == s)
    }

    /// Whether the trigger holds for `model`, judged statically.
    pub fn triggers_on(self, model: &Model) -> bool {
        match self {
            FaultEffect::WrongEpsilonInNorm => model.count_kind(LayerKind::BatchNorm) > 0,
            FaultEffect::SkippedGradientTerm => model.count_kind(LayerKind::Dense) > 0,
            FaultEffect::LeakedAllocationPerStep => model.optimizer.kind.is_stateful(),
            FaultEffect::QuadraticSlowdown => model.metadata.depth >= SLOWDOWN_MIN_DEPTH,
            FaultEffect::NanOnExtremeInput => model.count_kind(LayerKind::Sigmoid) > 0,
            FaultEffect::CrashOnKernelGtInput => {
                let Ok(shapes) = infer_shapes(model) else { return false };
                let ins = input_specs(model, &shapes);
                model.nodes.values().any(|n| {
                    n.kind == LayerKind::Conv2d && {
                        let x = &ins[&n.id][0];
                        let k = n.int("kernel_size");
                        x.rank() == 4 && (k > x.shape[2] || k > x.shape[3])
                    }
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub id: String,
    pub effect: FaultEffect,
    pub site: String,
    pub trigger: String,
    /// Oracle families expected to observe the effect.
    pub families: Vec<String>,
}

#[derive(Deserialize)]
struct RegistryFile {
    #[allow(dead_code)]
    version: u32,
    fault: Vec<FaultSpec>,
}

pub fn registry() -> &'static [FaultSpec] {
    static REG: OnceLock<Vec<FaultSpec>> = OnceLock::new();
    REG.get_or_init(|| {
        let file: RegistryFile = toml::from_str(REGISTRY).expect("bundled fault registry parses");
        file.fault
    })
}

pub fn lookup(id: &str) -> Option<&'static FaultSpec> {
    registry().iter().find(|f| f.id == id)
}

/// Faults armed on one executor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultSet {
    armed: BTreeSet<FaultEffect>,
}

impl FaultSet {
    pub fn arm(&mut self, id: &str) -> Option<FaultEffect> {
        let spec = lookup(id)?;
        self.armed.insert(spec.effect);
        Some(spec.effect)
    }

    pub fn disarm_all(&mut self) {
        self.armed.clear();
    }

    pub fn is_armed(&self, e: FaultEffect) -> bool {
        self.armed.contains(&e)
    }

    pub fn is_empty(&self) -> bool {
        self.armed.is_empty()
    }

    pub fn armed(&self) -> impl Iterator<Item = FaultEffect> + '_ {
        self.armed.iter().copied()
    }

    /// Ids of armed faults whose trigger holds for `model`.
    pub fn active_for(&self, model: &Model) -> Vec<String> {
        self.armed
            .iter()
            .filter(|e| e.triggers_on(model))
            .map(|e| e.id().to_string())
            .collect()
    }
}

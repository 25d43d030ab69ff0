//! Two independently written executors over the graph IR.
//!
//! Backend A interprets the graph node by node with direct loops. Backend B
//! lowers the graph to an instruction program (im2col convolutions, gather
//! tables for pooling, a flat parameter arena, buffer reuse at inference) and
//! is the only backend that accepts armed faults. Both compute in f64 and
//! round every node output and every updated parameter to the model dtype.

mod data;
pub mod faults;
mod lowered;
mod meter;
mod params;
mod reference;
mod tensor;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{probe_input, Batch, Dataset, DatasetConfig, Targets};
pub use faults::{FaultEffect, FaultSet, FaultSpec};
pub use meter::{Meter, OPS_PER_MS};
pub use params::{key as param_key, ParamStore};
pub use tensor::TensorValue;

use crate::graph::{infer_shapes, Model, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BackendId {
    A,
    B,
}

impl BackendId {
    pub fn name(self) -> &'static str {
        match self {
            BackendId::A => "A",
            BackendId::B => "B",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Mutation,
    Forward,
    Loss,
    Backward,
    Optimizer,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crash {
    pub phase: Phase,
    pub message: String,
}

pub(crate) fn fail(phase: Phase, message: impl Into<String>) -> Crash {
    Crash {
        phase,
        message: message.into(),
    }
}

/// Parameter gradients keyed like [`ParamStore::tensors`].
pub type Gradients = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub backend: BackendId,
    /// Id of the sink node, whose output is the model output.
    pub output_node: String,
    pub per_layer_outputs: BTreeMap<String, TensorValue>,
    pub loss_series: Vec<f64>,
    /// Max-abs gradient per parameter tensor at the last step.
    pub gradient_summary: BTreeMap<String, f64>,
    /// Virtual milliseconds per step (training) or per batch (inference).
    pub step_times: Vec<f64>,
    /// Peak live bytes per step.
    pub mem_series: Vec<u64>,
    pub eval_metric: Option<f64>,
    pub crash: Option<Crash>,
    pub active_faults: Vec<String>,
}

impl ExecutionTrace {
    pub fn empty(backend: BackendId, model: &Model) -> Self {
        Self {
            backend,
            output_node: model.sink().unwrap_or_default().to_string(),
            per_layer_outputs: BTreeMap::new(),
            loss_series: Vec::new(),
            gradient_summary: BTreeMap::new(),
            step_times: Vec::new(),
            mem_series: Vec::new(),
            eval_metric: None,
            crash: None,
            active_faults: Vec::new(),
        }
    }

    pub fn final_output(&self) -> Option<&TensorValue> {
        self.per_layer_outputs.get(&self.output_node)
    }

    pub fn total_time(&self) -> f64 {
        self.step_times.iter().sum()
    }

    pub fn max_abs_gradient(&self) -> Option<f64> {
        if self.gradient_summary.is_empty() {
            return None;
        }
        Some(self.gradient_summary.values().fold(0.0f64, |m, v| m.max(if v.is_nan() { f64::INFINITY } else { *v })))
    }

    pub fn peak_memory(&self) -> u64 {
        self.mem_series.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("unknown fault id `{0}`")]
    UnknownFault(String),
    #[error("faults can only be armed on backend B")]
    FaultOnReference,
}

/// Accuracy for classification, 1/(1+MSE) for regression.
pub fn eval_metric(task: Task, outputs: &[TensorValue], batches: &[Batch]) -> f64 {
    let mut hits = 0.0;
    let mut count = 0.0;
    let mut sq = 0.0;
    for (out, b) in outputs.iter().zip(batches) {
        let n = out.spec.batch();
        let width = out.spec.sample_numel();
        match &b.y {
            Targets::Classes(cls) => {
                for (i, &k) in cls.iter().enumerate().take(n) {
                    let row = &out.data[i * width..(i + 1) * width];
                    let mut best = 0;
                    for j in 1..width {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    if best == k && row[best].is_finite() {
                        hits += 1.0;
                    }
                    count += 1.0;
                }
            }
            Targets::Values(v) => {
                for (o, t) in out.data.iter().zip(v) {
                    sq += (o - t) * (o - t);
                    count += 1.0;
                }
            }
        }
    }
    if count == 0.0 {
        return 0.0;
    }
    match task {
        Task::Classification => hits / count,
        Task::Regression => {
            let mse = sq / count;
            if mse.is_nan() {
                0.0
            } else {
                1.0 / (1.0 + mse)
            }
        }
    }
}

/// Shared contract of the two backends.
pub(crate) trait Engine {
    /// Inference-mode forward pass; returns every node output.
    fn forward(
        &self,
        model: &Model,
        params: &ParamStore,
        x: &TensorValue,
        meter: &mut Meter,
    ) -> Result<BTreeMap<String, TensorValue>, Crash>;

    /// Training-mode loss and parameter gradients for one batch, no update.
    fn gradients(&self, model: &Model, params: &ParamStore, batch: &Batch) -> Result<(f64, Gradients), Crash>;

    /// Full training loop; fills the trace series and returns final parameters.
    fn train(
        &self,
        model: &Model,
        params: ParamStore,
        data: &Dataset,
        steps: usize,
        trace: &mut ExecutionTrace,
    ) -> Result<ParamStore, Crash>;

    /// Inference over the held-out batches; fills outputs, times and metric.
    fn infer(
        &self,
        model: &Model,
        params: &ParamStore,
        data: &Dataset,
        trace: &mut ExecutionTrace,
    ) -> Result<(), Crash>;
}

/// A backend instance plus its armed faults.
#[derive(Debug, Clone)]
pub struct Executor {
    backend: BackendId,
    faults: FaultSet,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_string()
    }
}

impl Executor {
    pub fn new(backend: BackendId) -> Self {
        Self {
            backend,
            faults: FaultSet::default(),
        }
    }

    pub fn backend(&self) -> BackendId {
        self.backend
    }

    pub fn faults(&self) -> &FaultSet {
        &self.faults
    }

    pub fn arm_fault(&mut self, id: &str) -> Result<FaultEffect, ExecError> {
        if self.backend == BackendId::A {
            return Err(ExecError::FaultOnReference);
        }
        self.faults
            .arm(id)
            .ok_or_else(|| ExecError::UnknownFault(id.to_string()))
    }

    pub fn disarm_all(&mut self) {
        self.faults.disarm_all();
    }

    fn with_engine<T>(&self, f: impl FnOnce(&dyn Engine) -> T) -> T {
        match self.backend {
            BackendId::A => f(&reference::Reference),
            BackendId::B => f(&lowered::Lowered { faults: &self.faults }),
        }
    }

    fn guarded<T>(&self, phase: Phase, f: impl FnOnce(&dyn Engine) -> Result<T, Crash>) -> Result<T, Crash> {
        match catch_unwind(AssertUnwindSafe(|| self.with_engine(f))) {
            Ok(r) => r,
            Err(p) => Err(fail(phase, panic_message(p))),
        }
    }

    fn start(&self, model: &Model, phase: Phase) -> (ExecutionTrace, Option<Crash>) {
        let mut trace = ExecutionTrace::empty(self.backend, model);
        trace.active_faults = self.faults.active_for(model);
        let pre = match infer_shapes(model) {
            Ok(_) => None,
            Err(e) => Some(fail(phase, e.to_string())),
        };
        (trace, pre)
    }

    /// Forward pass on `input` with parameters initialized from `seed`.
    pub fn forward(&self, model: &Model, input: &TensorValue, seed: u64) -> ExecutionTrace {
        match ParamStore::init(model, seed) {
            Ok(p) => self.forward_with(model, &p, input),
            Err(e) => {
                let mut t = ExecutionTrace::empty(self.backend, model);
                t.crash = Some(fail(Phase::Forward, e.to_string()));
                t
            }
        }
    }

    pub fn forward_with(&self, model: &Model, params: &ParamStore, input: &TensorValue) -> ExecutionTrace {
        let (mut trace, pre) = self.start(model, Phase::Forward);
        if let Some(c) = pre {
            trace.crash = Some(c);
            return trace;
        }
        if input.spec != model.input_spec {
            trace.crash = Some(fail(
                Phase::Forward,
                format!("input {} does not match model input {}", input.spec, model.input_spec),
            ));
            return trace;
        }
        let mut meter = Meter::default();
        match self.guarded(Phase::Forward, |e| e.forward(model, params, input, &mut meter)) {
            Ok(outs) => {
                trace.per_layer_outputs = outs;
                trace.step_times.push(meter.take_ms());
                trace.mem_series.push(meter.take_peak());
            }
            Err(c) => trace.crash = Some(c),
        }
        trace
    }

    /// Train from parameters initialized with `seed`.
    pub fn train(&self, model: &Model, data: &Dataset, steps: usize, seed: u64) -> (ExecutionTrace, Option<ParamStore>) {
        match ParamStore::init(model, seed) {
            Ok(p) => self.train_from(model, p, data, steps),
            Err(e) => {
                let mut t = ExecutionTrace::empty(self.backend, model);
                t.crash = Some(fail(Phase::Forward, e.to_string()));
                (t, None)
            }
        }
    }

    pub fn train_from(
        &self,
        model: &Model,
        params: ParamStore,
        data: &Dataset,
        steps: usize,
    ) -> (ExecutionTrace, Option<ParamStore>) {
        let (mut trace, pre) = self.start(model, Phase::Forward);
        if let Some(c) = pre {
            trace.crash = Some(c);
            return (trace, None);
        }
        let result = {
            let t = &mut trace;
            self.guarded(Phase::Forward, move |e| e.train(model, params, data, steps, t))
        };
        match result {
            Ok(p) => (trace, Some(p)),
            Err(c) => {
                trace.crash = Some(c);
                (trace, None)
            }
        }
    }

    /// Inference on the held-out batches; `params` defaults to a fresh init from `seed`.
    pub fn infer(&self, model: &Model, data: &Dataset, params: Option<&ParamStore>, seed: u64) -> ExecutionTrace {
        let owned;
        let params = match params {
            Some(p) => p,
            None => match ParamStore::init(model, seed) {
                Ok(p) => {
                    owned = p;
                    &owned
                }
                Err(e) => {
                    let mut t = ExecutionTrace::empty(self.backend, model);
                    t.crash = Some(fail(Phase::Inference, e.to_string()));
                    return t;
                }
            },
        };
        let (mut trace, pre) = self.start(model, Phase::Inference);
        if let Some(c) = pre {
            trace.crash = Some(c);
            return trace;
        }
        let result = {
            let t = &mut trace;
            self.guarded(Phase::Inference, move |e| e.infer(model, params, data, t))
        };
        if let Err(c) = result {
            trace.crash = Some(c);
        }
        trace
    }

    /// Training-mode loss and gradients for one batch.
    pub fn gradients(&self, model: &Model, params: &ParamStore, batch: &Batch) -> Result<(f64, Gradients), Crash> {
        infer_shapes(model).map_err(|e| fail(Phase::Forward, e.to_string()))?;
        self.guarded(Phase::Backward, |e| e.gradients(model, params, batch))
    }
}

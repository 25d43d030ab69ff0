//! Seeded synthetic datasets: Gaussian blobs for classification, a noisy
//! linear map for regression.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TensorValue;
use crate::graph::{infer_shapes, Model, Task, TensorSpec};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_samples: 64,
            eval_samples: 64,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `[batch, outputs]`.
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: TensorValue,
    pub y: Targets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    /// Classes (classification) or target width (regression).
    pub outputs: usize,
    pub train: Vec<Batch>,
    pub eval: Vec<Batch>,
}

struct Generator {
    task: Task,
    outputs: usize,
    dims: usize,
    /// Class centres or the regression map, row-major `[outputs, dims]`.
    table: Vec<f64>,
}

impl Generator {
    fn sample(&self, spec: &TensorSpec, first: usize, r: &mut impl Rng) -> Batch {
        let n = spec.batch();
        let mut x = Vec::with_capacity(spec.numel());
        let mut classes = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            match self.task {
                Task::Classification => {
                    let k = (first + i) % self.outputs;
                    let centre = &self.table[k * self.dims..(k + 1) * self.dims];
                    for c in centre {
                        let z: f64 = r.sample(StandardNormal);
                        x.push(spec.dtype.round(c + z));
                    }
                    classes.push(k);
                }
                Task::Regression => {
                    let row: Vec<f64> = (0..self.dims)
                        .map(|_| spec.dtype.round(r.sample::<f64, _>(StandardNormal)))
                        .collect();
                    let scale = 1.0 / (self.dims as f64).sqrt();
                    for o in 0..self.outputs {
                        let w = &self.table[o * self.dims..(o + 1) * self.dims];
                        let dot: f64 = w.iter().zip(&row).map(|(a, b)| a * b).sum();
                        let z: f64 = r.sample(StandardNormal);
                        values.push(dot * scale + 0.1 * z);
                    }
                    x.extend(row);
                }
            }
        }
        let y = match self.task {
            Task::Classification => Targets::Classes(classes),
            Task::Regression => Targets::Values(values),
        };
        Batch {
            x: TensorValue::new(spec.clone(), x),
            y,
        }
    }
}

impl Dataset {
    /// Build a dataset matching the model's input spec, task and output width.
    pub fn for_model(model: &Model, cfg: &DatasetConfig) -> Self {
        let outputs = infer_shapes(model)
            .ok()
            .and_then(|s| model.sink().and_then(|k| s.get(k).map(|t| t.sample_numel())))
            .unwrap_or(1)
            .max(1);
        Self::generate(&model.input_spec, model.task(), outputs, cfg)
    }

    pub fn generate(spec: &TensorSpec, task: Task, outputs: usize, cfg: &DatasetConfig) -> Self {
        let dims = spec.sample_numel();
        let mut tr = rng::stream(cfg.seed, "data/table");
        let table = (0..outputs * dims).map(|_| tr.sample(StandardNormal)).collect();
        let g = Generator {
            task,
            outputs,
            dims,
            table,
        };
        let n = spec.batch();
        let batches = |samples: usize, label: &str| {
            let mut r = rng::stream(cfg.seed, label);
            (0..samples.div_ceil(n).max(1))
                .map(|b| g.sample(spec, b * n, &mut r))
                .collect::<Vec<_>>()
        };
        Self {
            task,
            outputs,
            train: batches(cfg.train_samples, "data/train"),
            eval: batches(cfg.eval_samples, "data/eval"),
        }
    }

    pub fn batch(&self, step: usize) -> &Batch {
        &self.train[step % self.train.len()]
    }
}

/// A fixed standard-normal input batch, used for probes and rewards.
pub fn probe_input(spec: &TensorSpec, seed: u64) -> TensorValue {
    let mut r = rng::stream(seed, "data/probe");
    let data = (0..spec.numel())
        .map(|_| spec.dtype.round(r.sample(StandardNormal)))
        .collect();
    TensorValue::new(spec.clone(), data)
}

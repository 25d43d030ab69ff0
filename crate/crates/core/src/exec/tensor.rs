use serde::{Deserialize, Serialize};

use crate::graph::TensorSpec;

/// A dense row-major tensor. Values are held in f64 and already rounded to
/// the precision named by `spec.dtype`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorValue {
    pub spec: TensorSpec,
    pub data: Vec<f64>,
}

impl TensorValue {
    pub fn new(spec: TensorSpec, data: Vec<f64>) -> Self {
        assert_eq!(spec.numel(), data.len(), "buffer length must match {spec}");
        Self { spec, data }
    }

    pub fn zeros(spec: TensorSpec) -> Self {
        let n = spec.numel();
        Self {
            spec,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise |a - b|; infinite if the specs differ.
    pub fn max_abs_diff(&self, other: &TensorValue) -> f64 {
        if self.spec.shape != other.spec.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn round_to_dtype(&mut self) {
        let dt = self.spec.dtype;
        for v in &mut self.data {
            *v = dt.round(*v);
        }
    }
}

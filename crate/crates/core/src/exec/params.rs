//! Trainable parameters and running statistics, keyed `<node>/<name>`.
//!
//! Layouts: Conv2d weight `[out, in, k, k]`, Dense weight `[units, in]`,
//! biases and BatchNorm vectors `[channels]`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{infer_shapes, input_specs, LayerKind, Model, ShapeError};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Vec<f64>>,
    /// Non-trainable state (BatchNorm running mean/var).
    pub buffers: BTreeMap<String, Vec<f64>>,
}

pub fn key(node: &str, name: &str) -> String {
    format!("{node}/{name}")
}

impl ParamStore {
    /// He-uniform weights, zero biases, unit gamma, zero beta, unit running variance.
    /// Values depend only on (seed, node id, shape).
    pub fn init(model: &Model, seed: u64) -> Result<Self, ShapeError> {
        let shapes = infer_shapes(model)?;
        let ins = input_specs(model, &shapes);
        let dt = model.dtype();
        let mut store = ParamStore::default();
        for node in model.nodes.values() {
            let x = &ins[&node.id][0];
            let mut r = rng::stream(seed, &format!("param/{}", node.id));
            let mut he = |fan_in: usize, n: usize| -> Vec<f64> {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| dt.round(r.gen_range(-bound..bound))).collect()
            };
            match node.kind {
                LayerKind::Conv2d => {
                    let (oc, ic, k) = (node.int("out_channels"), x.channels(), node.int("kernel_size"));
                    store.tensors.insert(key(&node.id, "weight"), he(ic * k * k, oc * ic * k * k));
                    store.tensors.insert(key(&node.id, "bias"), vec![0.0; oc]);
                }
                LayerKind::Dense => {
                    let (u, fan) = (node.int("units"), x.sample_numel());
                    store.tensors.insert(key(&node.id, "weight"), he(fan, u * fan));
                    store.tensors.insert(key(&node.id, "bias"), vec![0.0; u]);
                }
                LayerKind::BatchNorm => {
                    let c = x.channels();
                    store.tensors.insert(key(&node.id, "gamma"), vec![1.0; c]);
                    store.tensors.insert(key(&node.id, "beta"), vec![0.0; c]);
                    store.buffers.insert(key(&node.id, "running_mean"), vec![0.0; c]);
                    store.buffers.insert(key(&node.id, "running_var"), vec![1.0; c]);
                }
                _ => {}
            }
        }
        Ok(store)
    }

    pub fn get(&self, node: &str, name: &str) -> &[f64] {
        self.tensors
            .get(&key(node, name))
            .or_else(|| self.buffers.get(&key(node, name)))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Vec::len).sum()
    }

    /// Multiply every trainable value by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            for v in t {
                *v *= factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let m = seeds::builtin("lenet_small").unwrap();
        let a = ParamStore::init(&m, 7).unwrap();
        assert_eq!(a, ParamStore::init(&m, 7).unwrap());
        assert_ne!(a, ParamStore::init(&m, 8).unwrap());
        assert_eq!(a.get("c1", "weight").len(), 4 * 1 * 9);
        assert_eq!(a.get("d", "weight").len(), 10 * 72);
        assert_eq!(a.numel(), m.metadata.param_count);
    }
}

//! Layer input, parameter and sequence coverage over a set of models.
//!
//! Every metric is covered/total over a fixed finite universe, so each is a
//! set function: monotone under union and independent of insertion order.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::graph::{infer_shapes, input_specs, DType, LayerKind, Model, ParamValue};
use crate::mutate::{extent_range, Domain, MutationTable};
use crate::seeds;

/// Input ranks counted by LIC.
pub const RANKS: std::ops::RangeInclusive<usize> = 1..=4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub lic: f64,
    pub lpc: f64,
    pub lsc: f64,
    pub n_type: usize,
    pub n_dim: usize,
    pub n_shape: usize,
    pub total_type: usize,
    pub total_dim: usize,
    pub total_shape: usize,
    pub n_param: usize,
    pub total_param: usize,
    pub n_pair: usize,
    pub total_pair: usize,
}

type ParamConfig = (LayerKind, Vec<i64>);

/// Discrete-valued parameters per kind, in table order.
fn discrete_params(table: &MutationTable, kind: LayerKind) -> Vec<(&str, &[i64])> {
    table
        .layer_params(kind)
        .filter_map(|p| match &p.domain {
            Domain::Values(v) => Some((p.param.as_str(), v.as_slice())),
            _ => None,
        })
        .collect()
}

/// Every (kind, discrete-parameter tuple) enumerable from the mutation table.
pub fn param_universe() -> &'static BTreeSet<ParamConfig> {
    static U: OnceLock<BTreeSet<ParamConfig>> = OnceLock::new();
    U.get_or_init(|| {
        let table = MutationTable::builtin();
        let mut out = BTreeSet::new();
        for kind in LayerKind::ALL {
            let mut tuples: Vec<Vec<i64>> = vec![Vec::new()];
            for (_, values) in discrete_params(table, kind) {
                tuples = tuples
                    .iter()
                    .flat_map(|t| {
                        values.iter().map(move |v| {
                            let mut t = t.clone();
                            t.push(*v);
                            t
                        })
                    })
                    .collect();
            }
            out.extend(tuples.into_iter().map(|t| (kind, t)));
        }
        out
    })
}

fn param_config(table: &MutationTable, kind: LayerKind, params: &crate::graph::Params) -> Option<ParamConfig> {
    let tuple = discrete_params(table, kind)
        .iter()
        .map(|(name, _)| params.get(*name).map(|v: &ParamValue| v.as_i64()))
        .collect::<Option<Vec<_>>>()?;
    Some((kind, tuple))
}

fn input_shapes(model: &Model) -> Vec<Vec<usize>> {
    let Ok(shapes) = infer_shapes(model) else { return Vec::new() };
    input_specs(model, &shapes)
        .into_values()
        .flatten()
        .map(|s| s.shape)
        .collect()
}

/// Layer input shapes of the bundled seeds and of every single-node resize
/// of a Conv2d or Dense extent within its allowed range.
pub fn shape_universe() -> &'static BTreeSet<Vec<usize>> {
    static U: OnceLock<BTreeSet<Vec<usize>>> = OnceLock::new();
    U.get_or_init(|| {
        let mut out = BTreeSet::new();
        for seed in seeds::all_builtin() {
            out.extend(input_shapes(&seed));
            for node in seed.nodes.values() {
                let key = match node.kind {
                    LayerKind::Conv2d => "out_channels",
                    LayerKind::Dense => "units",
                    _ => continue,
                };
                let (lo, hi) = extent_range(node.int(key));
                for v in lo..=hi {
                    let mut m = seed.clone();
                    m.nodes
                        .get_mut(&node.id)
                        .expect("node exists")
                        .params
                        .insert(key.to_string(), ParamValue::Int(v as i64));
                    out.extend(input_shapes(&m));
                }
            }
        }
        out
    })
}

/// Accumulates the covered items of a growing model set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Coverage {
    types: BTreeSet<DType>,
    ranks: BTreeSet<usize>,
    shapes: BTreeSet<Vec<usize>>,
    params: BTreeSet<ParamConfig>,
    pairs: BTreeSet<(LayerKind, LayerKind)>,
}

impl Coverage {
    pub fn add(&mut self, model: &Model) {
        let table = MutationTable::builtin();
        if let Ok(shapes) = infer_shapes(model) {
            for spec in input_specs(model, &shapes).into_values().flatten() {
                self.types.insert(spec.dtype);
                if RANKS.contains(&spec.rank()) {
                    self.ranks.insert(spec.rank());
                }
                if shape_universe().contains(&spec.shape) {
                    self.shapes.insert(spec.shape);
                }
            }
        }
        for node in model.nodes.values() {
            if let Some(c) = param_config(table, node.kind, &node.params) {
                if param_universe().contains(&c) {
                    self.params.insert(c);
                }
            }
        }
        for (a, b) in &model.edges {
            if let (Some(x), Some(y)) = (model.nodes.get(a), model.nodes.get(b)) {
                self.pairs.insert((x.kind, y.kind));
            }
        }
    }

    pub fn stats(&self) -> CoverageStats {
        let total_type = DType::ALL.len();
        let total_dim = RANKS.count();
        let total_shape = shape_universe().len();
        let total_param = param_universe().len();
        let total_pair = LayerKind::ALL.len() * LayerKind::ALL.len();
        let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let lic_n = self.types.len() + self.ranks.len() + self.shapes.len();
        CoverageStats {
            lic: frac(lic_n, total_type + total_dim + total_shape),
            lpc: frac(self.params.len(), total_param),
            lsc: frac(self.pairs.len(), total_pair),
            n_type: self.types.len(),
            n_dim: self.ranks.len(),
            n_shape: self.shapes.len(),
            total_type,
            total_dim,
            total_shape,
            n_param: self.params.len(),
            total_param,
            n_pair: self.pairs.len(),
            total_pair,
        }
    }
}

pub fn coverage<'a>(models: impl IntoIterator<Item = &'a Model>) -> CoverageStats {
    let mut c = Coverage::default();
    for m in models {
        c.add(m);
    }
    c.stats()
}

pub fn lic<'a>(models: impl IntoIterator<Item = &'a Model>) -> f64 {
    coverage(models).lic
}

pub fn lpc<'a>(models: impl IntoIterator<Item = &'a Model>) -> f64 {
    coverage(models).lpc
}

pub fn lsc<'a>(models: impl IntoIterator<Item = &'a Model>) -> f64 {
    coverage(models).lsc
}

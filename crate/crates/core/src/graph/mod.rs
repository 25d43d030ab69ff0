//! Computation-graph IR: tensor specs, layer nodes, models and their lineage.
//!
//! A [`Model`] is a single-source, single-sink DAG of [`LayerNode`]s together
//! with the execution script (loss and optimizer). Weights are not part of the
//! model; executors initialize them deterministically from a seed and the node
//! ids, so a serialized model plus a seed fully determines an execution.

mod catalog;
mod dsl;
mod lineage;
mod shape;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use catalog::{
    catalog_candidates, SlotContext, SlotSpec, StructureCatalog, Template, TemplateError, Tier,
};
pub use dsl::{parse_model_dsl, serialize_model};
pub use lineage::{EditRecord, Lineage, OpId};
pub use shape::{infer_shapes, input_specs, ShapeError};
pub use validate::{validate_graph, Diagnostic, DiagnosticCode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F16,
    F32,
    F64,
}

impl DType {
    pub const ALL: [DType; 3] = [DType::F16, DType::F32, DType::F64];

    pub fn size_bytes(self) -> u64 {
        match self {
            DType::F16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Largest finite magnitude representable in this precision.
    pub fn max_finite(self) -> f64 {
        match self {
            DType::F16 => 6.55e4,
            DType::F32 => 3.4e38,
            DType::F64 => f64::MAX,
        }
    }

    /// Round an f64 to the nearest value of this precision.
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F64 => x,
            DType::F32 => x as f32 as f64,
            DType::F16 => half::f16::from_f64(x).to_f64(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F16 => "f16",
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "f16" => Some(DType::F16),
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Element type plus extents; extent 0 is the batch dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorSpec {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(dtype: DType, shape: Vec<usize>) -> Self {
        Self { dtype, shape }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Channels for rank-4 tensors, features for rank-2 tensors.
    pub fn channels(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Elements per sample (everything but the batch extent).
    pub fn sample_numel(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn is_well_formed(&self) -> bool {
        !self.shape.is_empty() && self.shape.iter().all(|&d| d >= 1)
    }

    pub fn with_shape(&self, shape: Vec<usize>) -> Self {
        Self {
            dtype: self.dtype,
            shape,
        }
    }
}

impl fmt::Display for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.dtype)?;
        for (i, d) in self.shape.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

impl std::str::FromStr for TensorSpec {
    type Err = String;

    /// Parses the display form, e.g. `f32[1,3,8,8]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (head, rest) = s.split_once('[').ok_or_else(|| format!("expected `<dtype>[...]`, got `{s}`"))?;
        let dtype = DType::from_name(head).ok_or_else(|| format!("unknown dtype `{head}`"))?;
        let body = rest.strip_suffix(']').ok_or_else(|| format!("unterminated shape in `{s}`"))?;
        let shape = body
            .split(',')
            .map(|d| d.trim().parse::<usize>().map_err(|_| format!("bad extent `{d}` in `{s}`")))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = TensorSpec::new(dtype, shape);
        if !spec.is_well_formed() {
            return Err(format!("`{s}` has an empty rank or zero extent"));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d,
    Dense,
    BatchNorm,
    ReLU,
    Sigmoid,
    MaxPool,
    AvgPool,
    Flatten,
    Add,
    Concat,
    Identity,
}

impl LayerKind {
    pub const ALL: [LayerKind; 11] = [
        LayerKind::Conv2d,
        LayerKind::Dense,
        LayerKind::BatchNorm,
        LayerKind::ReLU,
        LayerKind::Sigmoid,
        LayerKind::MaxPool,
        LayerKind::AvgPool,
        LayerKind::Flatten,
        LayerKind::Add,
        LayerKind::Concat,
        LayerKind::Identity,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "Conv2d",
            LayerKind::Dense => "Dense",
            LayerKind::BatchNorm => "BatchNorm",
            LayerKind::ReLU => "ReLU",
            LayerKind::Sigmoid => "Sigmoid",
            LayerKind::MaxPool => "MaxPool",
            LayerKind::AvgPool => "AvgPool",
            LayerKind::Flatten => "Flatten",
            LayerKind::Add => "Add",
            LayerKind::Concat => "Concat",
            LayerKind::Identity => "Identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }

    pub fn class(self) -> FunctionalityClass {
        use FunctionalityClass::*;
        match self {
            LayerKind::Conv2d | LayerKind::Dense => FeatureExtraction,
            LayerKind::BatchNorm => Normalization,
            LayerKind::ReLU | LayerKind::Sigmoid => Activation,
            LayerKind::MaxPool | LayerKind::AvgPool => Pooling,
            LayerKind::Flatten | LayerKind::Identity => Reshaping,
            LayerKind::Add | LayerKind::Concat => Merging,
        }
    }

    pub fn is_merge(self) -> bool {
        matches!(self, LayerKind::Add | LayerKind::Concat)
    }

    /// Parameter schema: (name, type, default). `None` default means required.
    pub fn param_schema(self) -> &'static [ParamField] {
        use ParamType::*;
        const CONV: &[ParamField] = &[
            ParamField::new("kernel_size", Int, None),
            ParamField::new("out_channels", Int, None),
            ParamField::new("padding", Int, Some(DefaultValue::Int(0))),
            ParamField::new("stride", Int, Some(DefaultValue::Int(1))),
        ];
        const DENSE: &[ParamField] = &[ParamField::new("units", Int, None)];
        const NORM: &[ParamField] = &[
            ParamField::new("epsilon", Float, Some(DefaultValue::Float(1e-5))),
            ParamField::new("momentum", Float, Some(DefaultValue::Float(0.1))),
        ];
        const POOL: &[ParamField] = &[
            ParamField::new("kernel_size", Int, None),
            ParamField::new("stride", Int, Some(DefaultValue::SameAs("kernel_size"))),
        ];
        match self {
            LayerKind::Conv2d => CONV,
            LayerKind::Dense => DENSE,
            LayerKind::BatchNorm => NORM,
            LayerKind::MaxPool | LayerKind::AvgPool => POOL,
            _ => &[],
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Six-way functional taxonomy used to keep structure replacement consistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionalityClass {
    FeatureExtraction,
    Normalization,
    Activation,
    Pooling,
    Reshaping,
    Merging,
}

impl FunctionalityClass {
    pub fn name(self) -> &'static str {
        match self {
            FunctionalityClass::FeatureExtraction => "feature-extraction",
            FunctionalityClass::Normalization => "normalization",
            FunctionalityClass::Activation => "activation",
            FunctionalityClass::Pooling => "pooling",
            FunctionalityClass::Reshaping => "reshaping",
            FunctionalityClass::Merging => "merging",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamType {
    Int,
    Float,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DefaultValue {
    Int(i64),
    Float(f64),
    SameAs(&'static str),
}

#[derive(Debug, Clone, Copy)]
pub struct ParamField {
    pub name: &'static str,
    pub ty: ParamType,
    pub default: Option<DefaultValue>,
}

impl ParamField {
    pub const fn new(name: &'static str, ty: ParamType, default: Option<DefaultValue>) -> Self {
        Self { name, ty, default }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
}

impl ParamValue {
    pub fn as_i64(self) -> i64 {
        match self {
            ParamValue::Int(v) => v,
            ParamValue::Float(v) => v as i64,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            ParamValue::Int(v) => v as f64,
            ParamValue::Float(v) => v,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v:?}"),
        }
    }
}

pub type Params = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub params: Params,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, kind: LayerKind, params: Params) -> Self {
        Self {
            id: id.into(),
            kind,
            params,
        }
    }

    pub fn functionality_class(&self) -> FunctionalityClass {
        self.kind.class()
    }

    pub fn int(&self, key: &str) -> usize {
        self.params.get(key).map(|v| v.as_i64().max(0) as usize).unwrap_or(0)
    }

    pub fn float(&self, key: &str) -> f64 {
        self.params.get(key).map(|v| v.as_f64()).unwrap_or(0.0)
    }
}

/// Which of the two supported tasks a model is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    MeanSquaredError,
    SmoothL1,
    BinaryCrossEntropy,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::CrossEntropy,
        LossKind::MeanSquaredError,
        LossKind::SmoothL1,
        LossKind::BinaryCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "CrossEntropy",
            LossKind::MeanSquaredError => "MeanSquaredError",
            LossKind::SmoothL1 => "SmoothL1",
            LossKind::BinaryCrossEntropy => "BinaryCrossEntropy",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }

    pub fn task(self) -> Task {
        match self {
            LossKind::CrossEntropy | LossKind::BinaryCrossEntropy => Task::Classification,
            LossKind::MeanSquaredError | LossKind::SmoothL1 => Task::Regression,
        }
    }

    pub fn param_schema(self) -> &'static [ParamField] {
        use ParamType::*;
        const CE: &[ParamField] = &[ParamField::new(
            "label_smoothing",
            Float,
            Some(DefaultValue::Float(0.0)),
        )];
        const SL1: &[ParamField] = &[ParamField::new("beta", Float, Some(DefaultValue::Float(1.0)))];
        match self {
            LossKind::CrossEntropy => CE,
            LossKind::SmoothL1 => SL1,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    MomentumSgd,
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Sgd,
        OptimizerKind::MomentumSgd,
        OptimizerKind::RmsProp,
        OptimizerKind::Adam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::MomentumSgd => "MomentumSGD",
            OptimizerKind::RmsProp => "RMSProp",
            OptimizerKind::Adam => "Adam",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }

    /// Optimizers that keep per-parameter state between steps.
    pub fn is_stateful(self) -> bool {
        !matches!(self, OptimizerKind::Sgd)
    }

    pub fn param_schema(self) -> &'static [ParamField] {
        use ParamType::*;
        const LR: ParamField = ParamField::new("learning_rate", Float, Some(DefaultValue::Float(0.01)));
        const SGD: &[ParamField] = &[LR];
        const MOM: &[ParamField] = &[LR, ParamField::new("momentum", Float, Some(DefaultValue::Float(0.9)))];
        const RMS: &[ParamField] = &[
            ParamField::new("epsilon", Float, Some(DefaultValue::Float(1e-7))),
            LR,
            ParamField::new("rho", Float, Some(DefaultValue::Float(0.9))),
        ];
        const ADAM: &[ParamField] = &[
            ParamField::new("beta1", Float, Some(DefaultValue::Float(0.9))),
            ParamField::new("beta2", Float, Some(DefaultValue::Float(0.999))),
            ParamField::new("epsilon", Float, Some(DefaultValue::Float(1e-8))),
            LR,
        ];
        match self {
            OptimizerKind::Sgd => SGD,
            OptimizerKind::MomentumSgd => MOM,
            OptimizerKind::RmsProp => RMS,
            OptimizerKind::Adam => ADAM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub params: Params,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            params: defaults_for(kind.param_schema()),
        }
    }

    pub fn float(&self, key: &str) -> f64 {
        self.params.get(key).map(|v| v.as_f64()).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub params: Params,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            params: defaults_for(kind.param_schema()),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.float("learning_rate")
    }

    pub fn float(&self, key: &str) -> f64 {
        self.params.get(key).map(|v| v.as_f64()).unwrap_or(0.0)
    }
}

pub(crate) fn defaults_for(schema: &[ParamField]) -> Params {
    let mut out = Params::new();
    for f in schema {
        match f.default {
            Some(DefaultValue::Int(v)) => {
                out.insert(f.name.to_string(), ParamValue::Int(v));
            }
            Some(DefaultValue::Float(v)) => {
                out.insert(f.name.to_string(), ParamValue::Float(v));
            }
            _ => {}
        }
    }
    out
}

/// Cached structural statistics; must always equal a fresh recomputation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    /// Nodes on the longest source-to-sink path.
    pub depth: usize,
    /// Largest channel / feature extent produced by any node.
    pub width: usize,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub nodes: BTreeMap<String, LayerNode>,
    /// Ordered edge list; the order of a node's incoming edges is its input order.
    pub edges: Vec<(String, String)>,
    pub input_spec: TensorSpec,
    pub loss: LossSpec,
    pub optimizer: OptimizerSpec,
    pub metadata: Metadata,
    pub lineage: Lineage,
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown layer kind `{name}` at line {line}, column {column}")]
    UnknownKind {
        line: usize,
        column: usize,
        name: String,
    },
    #[error("node `{node}` ({kind}) is missing required parameter `{param}` (line {line})")]
    MissingParam {
        line: usize,
        node: String,
        kind: String,
        param: String,
    },
    #[error("cycle detected through nodes {nodes:?}")]
    Cycle { nodes: Vec<String> },
    #[error("invalid model: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
}

impl Model {
    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.get(id)
    }

    pub fn task(&self) -> Task {
        self.loss.kind.task()
    }

    pub fn dtype(&self) -> DType {
        self.input_spec.dtype
    }

    /// Predecessors of `id` in input order.
    pub fn preds(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(_, t)| t == id)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn succs(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(s, _)| s == id)
            .map(|(_, t)| t.as_str())
            .collect()
    }

    pub fn sources(&self) -> Vec<&str> {
        self.nodes
            .keys()
            .filter(|id| !self.edges.iter().any(|(_, t)| t == *id))
            .map(|s| s.as_str())
            .collect()
    }

    pub fn sinks(&self) -> Vec<&str> {
        self.nodes
            .keys()
            .filter(|id| !self.edges.iter().any(|(s, _)| s == *id))
            .map(|s| s.as_str())
            .collect()
    }

    pub fn source(&self) -> Option<&str> {
        let s = self.sources();
        (s.len() == 1).then(|| s[0])
    }

    pub fn sink(&self) -> Option<&str> {
        let s = self.sinks();
        (s.len() == 1).then(|| s[0])
    }

    /// Kahn topological order with lexicographic tie-breaking; `None` on a cycle.
    pub fn topo_order(&self) -> Option<Vec<String>> {
        let mut indeg: BTreeMap<&str, usize> = self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        for (_, t) in &self.edges {
            if let Some(d) = indeg.get_mut(t.as_str()) {
                *d += 1;
            }
        }
        let mut ready: std::collections::BTreeSet<&str> =
            indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = ready.pop_first() {
            order.push(n.to_string());
            for (s, t) in &self.edges {
                if s == n {
                    if let Some(d) = indeg.get_mut(t.as_str()) {
                        *d -= 1;
                        if *d == 0 {
                            ready.insert(t.as_str());
                        }
                    }
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    /// Longest path, in nodes, from any source to any sink.
    pub fn longest_path(&self) -> Option<usize> {
        let order = self.topo_order()?;
        let mut best: BTreeMap<&str, usize> = BTreeMap::new();
        for id in &order {
            let d = self
                .preds(id)
                .iter()
                .filter_map(|p| best.get(p))
                .max()
                .copied()
                .unwrap_or(0)
                + 1;
            best.insert(id.as_str(), d);
        }
        Some(best.values().copied().max().unwrap_or(0))
    }

    /// Recompute depth, width and parameter count from the structure.
    pub fn compute_metadata(&self) -> Metadata {
        let depth = self.longest_path().unwrap_or(0);
        let (width, param_count) = match infer_shapes(self) {
            Ok(shapes) => {
                let width = shapes
                    .values()
                    .filter(|s| s.rank() >= 2)
                    .map(|s| s.channels())
                    .max()
                    .unwrap_or(0);
                let ins = input_specs(self, &shapes);
                let params = self
                    .nodes
                    .values()
                    .map(|n| node_param_count(n, ins.get(&n.id).and_then(|v| v.first())))
                    .sum();
                (width, params)
            }
            Err(_) => (0, 0),
        };
        Metadata {
            depth,
            width,
            param_count,
        }
    }

    pub fn refresh_metadata(&mut self) {
        self.metadata = self.compute_metadata();
    }

    /// Canonical content hash (over the serialized DSL), 16 hex chars.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serialize_model(self);
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Structural equality: nodes, edges and execution script (lineage ignored).
    pub fn same_structure(&self, other: &Model) -> bool {
        self.nodes == other.nodes
            && self.edges == other.edges
            && self.input_spec == other.input_spec
            && self.loss == other.loss
            && self.optimizer == other.optimizer
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.nodes.values().filter(|n| n.kind == kind).count()
    }
}

fn node_param_count(node: &LayerNode, input: Option<&TensorSpec>) -> usize {
    let Some(input) = input else { return 0 };
    match node.kind {
        LayerKind::Conv2d => {
            let k = node.int("kernel_size");
            let out = node.int("out_channels");
            out * input.channels() * k * k + out
        }
        LayerKind::Dense => {
            let units = node.int("units");
            units * input.sample_numel() + units
        }
        LayerKind::BatchNorm => 2 * input.channels(),
        _ => 0,
    }
}

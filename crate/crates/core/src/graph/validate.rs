use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{infer_shapes, LayerKind, Model, ParamType, ParamValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnosticCode {
    EmptyGraph,
    DanglingEdge,
    DuplicateEdge,
    Cycle,
    SourceCount,
    SinkCount,
    UnreachableNode,
    DeadEndNode,
    BadParams,
    BadInputSpec,
    ShapeInference,
    MetadataInconsistent,
    LineageInconsistent,
    BadExecutionScript,
}

impl DiagnosticCode {
    pub fn name(self) -> &'static str {
        match self {
            DiagnosticCode::EmptyGraph => "empty graph",
            DiagnosticCode::DanglingEdge => "dangling edge",
            DiagnosticCode::DuplicateEdge => "duplicate edge",
            DiagnosticCode::Cycle => "cycle",
            DiagnosticCode::SourceCount => "source count",
            DiagnosticCode::SinkCount => "sink count",
            DiagnosticCode::UnreachableNode => "unreachable node",
            DiagnosticCode::DeadEndNode => "dead-end node",
            DiagnosticCode::BadParams => "invalid parameters",
            DiagnosticCode::BadInputSpec => "invalid input spec",
            DiagnosticCode::ShapeInference => "shape inference",
            DiagnosticCode::MetadataInconsistent => "metadata inconsistent",
            DiagnosticCode::LineageInconsistent => "lineage inconsistent",
            DiagnosticCode::BadExecutionScript => "invalid execution script",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: DiagnosticCode,
    /// Offending node id, edge (`a->b`), or `model`.
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}: {}", self.code.name(), self.subject, self.message)
    }
}

fn diag(code: DiagnosticCode, subject: impl Into<String>, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        code,
        subject: subject.into(),
        message: message.into(),
    }
}

fn reach(model: &Model, start: &str, forward: bool) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![start.to_string()];
    while let Some(n) = stack.pop() {
        if !seen.insert(n.clone()) {
            continue;
        }
        let next = if forward { model.succs(&n) } else { model.preds(&n) };
        stack.extend(next.into_iter().map(str::to_string));
    }
    seen
}

fn check_params(model: &Model, out: &mut Vec<Diagnostic>) {
    for node in model.nodes.values() {
        let schema = node.kind.param_schema();
        for key in node.params.keys() {
            if !schema.iter().any(|f| f.name == key) {
                out.push(diag(DiagnosticCode::BadParams, &node.id, format!("unexpected parameter `{key}`")));
            }
        }
        for f in schema {
            match (node.params.get(f.name), f.ty) {
                (None, _) => out.push(diag(
                    DiagnosticCode::BadParams,
                    &node.id,
                    format!("missing parameter `{}`", f.name),
                )),
                (Some(ParamValue::Float(_)), ParamType::Int) => out.push(diag(
                    DiagnosticCode::BadParams,
                    &node.id,
                    format!("parameter `{}` must be an integer", f.name),
                )),
                _ => {}
            }
        }
        let bad = |msg: String| diag(DiagnosticCode::BadParams, &node.id, msg);
        match node.kind {
            LayerKind::Conv2d => {
                if node.params.get("kernel_size").is_some_and(|v| v.as_i64() < 1)
                    || node.params.get("stride").is_some_and(|v| v.as_i64() < 1)
                    || node.params.get("out_channels").is_some_and(|v| v.as_i64() < 1)
                    || node.params.get("padding").is_some_and(|v| v.as_i64() < 0)
                {
                    out.push(bad("Conv2d parameters out of domain".into()));
                }
            }
            LayerKind::Dense => {
                if node.params.get("units").is_some_and(|v| v.as_i64() < 1) {
                    out.push(bad("Dense units must be >= 1".into()));
                }
            }
            LayerKind::MaxPool | LayerKind::AvgPool => {
                if node.params.get("kernel_size").is_some_and(|v| v.as_i64() < 1)
                    || node.params.get("stride").is_some_and(|v| v.as_i64() < 1)
                {
                    out.push(bad("pool window parameters must be >= 1".into()));
                }
            }
            LayerKind::BatchNorm => {
                let eps = node.float("epsilon");
                let mom = node.float("momentum");
                if !(eps > 0.0 && eps.is_finite()) || !(mom > 0.0 && mom < 1.0) {
                    out.push(bad("BatchNorm epsilon must be > 0 and momentum in (0,1)".into()));
                }
            }
            _ => {}
        }
    }
}

fn check_script(model: &Model, out: &mut Vec<Diagnostic>) {
    let loss_schema = model.loss.kind.param_schema();
    if model.loss.params.len() != loss_schema.len()
        || loss_schema.iter().any(|f| !model.loss.params.contains_key(f.name))
    {
        out.push(diag(DiagnosticCode::BadExecutionScript, "loss", "loss parameters do not match schema"));
    }
    let opt_schema = model.optimizer.kind.param_schema();
    if model.optimizer.params.len() != opt_schema.len()
        || opt_schema.iter().any(|f| !model.optimizer.params.contains_key(f.name))
    {
        out.push(diag(
            DiagnosticCode::BadExecutionScript,
            "optimizer",
            "optimizer parameters do not match schema",
        ));
    }
    let lr = model.optimizer.learning_rate();
    if !(lr > 0.0 && lr.is_finite()) {
        out.push(diag(DiagnosticCode::BadExecutionScript, "optimizer", "learning_rate must be > 0"));
    }
    if model.optimizer.params.values().any(|v| !v.as_f64().is_finite() || v.as_f64() < 0.0) {
        out.push(diag(DiagnosticCode::BadExecutionScript, "optimizer", "optimizer parameters must be finite and >= 0"));
    }
    if model.loss.params.values().any(|v| !v.as_f64().is_finite() || v.as_f64() < 0.0) {
        out.push(diag(DiagnosticCode::BadExecutionScript, "loss", "loss parameters must be finite and >= 0"));
    }
}

/// Check every model invariant; an empty list means the model is valid.
pub fn validate_graph(model: &Model) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if model.nodes.is_empty() {
        out.push(diag(DiagnosticCode::EmptyGraph, "model", "model has no nodes"));
        return out;
    }
    if !model.input_spec.is_well_formed() {
        out.push(diag(DiagnosticCode::BadInputSpec, "model", format!("input spec {} has an empty rank or zero extent", model.input_spec)));
    }
    let mut seen = BTreeSet::new();
    let mut dangling = false;
    for (s, t) in &model.edges {
        let name = format!("{s}->{t}");
        if !model.nodes.contains_key(s) || !model.nodes.contains_key(t) {
            out.push(diag(DiagnosticCode::DanglingEdge, &name, "edge references an unknown node"));
            dangling = true;
        }
        if !seen.insert((s, t)) {
            out.push(diag(DiagnosticCode::DuplicateEdge, &name, "edge declared twice"));
        }
    }
    check_params(model, &mut out);
    check_script(model, &mut out);
    if dangling {
        return out;
    }
    if model.topo_order().is_none() {
        out.push(diag(DiagnosticCode::Cycle, "model", "edge set is not acyclic"));
        return out;
    }
    let sources = model.sources();
    let sinks = model.sinks();
    if sources.len() != 1 {
        out.push(diag(DiagnosticCode::SourceCount, "model", format!("expected one source, found {sources:?}")));
    }
    if sinks.len() != 1 {
        out.push(diag(DiagnosticCode::SinkCount, "model", format!("expected one sink, found {sinks:?}")));
    }
    if let (Some(src), Some(snk)) = (sources.first(), sinks.first()) {
        let fwd = reach(model, src, true);
        let back = reach(model, snk, false);
        for id in model.nodes.keys() {
            if !fwd.contains(id) {
                out.push(diag(DiagnosticCode::UnreachableNode, id, "node is not reachable from the source"));
            } else if !back.contains(id) {
                out.push(diag(DiagnosticCode::DeadEndNode, id, "node does not reach the sink"));
            }
        }
    }
    if let Err(e) = infer_shapes(model) {
        let subject = match &e {
            super::ShapeError::Mismatch { from, to, .. } => format!("{from}->{to}"),
            super::ShapeError::MergeArity { node, .. } => node.clone(),
            super::ShapeError::Cyclic => "model".into(),
        };
        out.push(diag(DiagnosticCode::ShapeInference, subject, e.to_string()));
    }
    let fresh = model.compute_metadata();
    if fresh != model.metadata {
        out.push(diag(
            DiagnosticCode::MetadataInconsistent,
            "model",
            format!("stored {:?} but recomputed {:?}", model.metadata, fresh),
        ));
    }
    let snum_total: u64 = model.lineage.snums.iter().sum();
    if snum_total != model.lineage.select_num {
        out.push(diag(
            DiagnosticCode::LineageInconsistent,
            "model",
            format!("select_num {} != sum of snums {}", model.lineage.select_num, snum_total),
        ));
    }
    out
}

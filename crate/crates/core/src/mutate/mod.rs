//! Mutation operators MO1–MO7 under guide constraints MC1–MC6.
//!
//! Every application yields either a valid mutant or a typed rejection; the
//! input model is never modified.

use std::collections::BTreeMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::graph::{validate_graph, EditRecord, LayerKind, Model, OpId};
use crate::rng;

mod ops;
mod surgery;
pub mod table;

pub use ops::{series_insert, LOSS_SITE, OPTIMIZER_SITE};
pub use table::{extent_range, Domain, MutationTable};

/// Mutation constraints; MC1–MC6 guide generation, MC7–MC9 filter mutants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Constraint {
    MC1,
    MC2,
    MC3,
    MC4,
    MC5,
    MC6,
    MC7,
    MC8,
    MC9,
}

impl Constraint {
    pub const ALL: [Constraint; 9] = [
        Constraint::MC1,
        Constraint::MC2,
        Constraint::MC3,
        Constraint::MC4,
        Constraint::MC5,
        Constraint::MC6,
        Constraint::MC7,
        Constraint::MC8,
        Constraint::MC9,
    ];
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Why an application produced no mutant. Displays as the report string,
/// e.g. `constraint-violation(MC3)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rejection {
    NoApplicableSite,
    ConstraintViolation(Constraint),
    ShapeInfeasible,
    StructuralCrash,
}

impl Rejection {
    /// Specificity used when several attempts fail for different reasons.
    pub(crate) fn rank(self) -> u8 {
        match self {
            Rejection::NoApplicableSite => 0,
            Rejection::ShapeInfeasible => 1,
            Rejection::ConstraintViolation(_) => 2,
            Rejection::StructuralCrash => 3,
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::NoApplicableSite => f.write_str("no-applicable-site"),
            Rejection::ConstraintViolation(c) => write!(f, "constraint-violation({c})"),
            Rejection::ShapeInfeasible => f.write_str("shape-infeasible"),
            Rejection::StructuralCrash => f.write_str("structural-crash"),
        }
    }
}

impl FromStr for Rejection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "no-applicable-site" => Ok(Rejection::NoApplicableSite),
            "shape-infeasible" => Ok(Rejection::ShapeInfeasible),
            "structural-crash" => Ok(Rejection::StructuralCrash),
            _ => {
                let inner = s
                    .strip_prefix("constraint-violation(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown rejection `{s}`"))?;
                Constraint::ALL
                    .iter()
                    .find(|c| c.to_string() == inner)
                    .map(|c| Rejection::ConstraintViolation(*c))
                    .ok_or_else(|| format!("unknown constraint `{inner}`"))
            }
        }
    }
}

impl Serialize for Rejection {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rejection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Mutated,
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutationOutcome {
    pub op: OpId,
    pub status: Status,
    pub mutant: Option<Model>,
    pub rejection: Option<Rejection>,
    /// Edited location, or the last site tried.
    pub site: String,
}

impl MutationOutcome {
    fn mutated(op: OpId, model: Model, site: String) -> Self {
        Self {
            op,
            status: Status::Mutated,
            mutant: Some(model),
            rejection: None,
            site,
        }
    }

    fn rejected(op: OpId, reason: Rejection) -> Self {
        Self {
            op,
            status: Status::Rejected,
            mutant: None,
            rejection: Some(reason),
            site: String::new(),
        }
    }

    pub fn is_mutated(&self) -> bool {
        self.status == Status::Mutated
    }
}

/// A successful edit before selection bookkeeping.
pub(crate) struct Draft {
    pub model: Model,
    pub site: String,
}

fn outcome(op: OpId, r: Result<Draft, Rejection>) -> MutationOutcome {
    match r {
        Ok(d) => MutationOutcome::mutated(op, d.model, d.site),
        Err(e) => MutationOutcome::rejected(op, e),
    }
}

pub fn mo1_replace_structure(model: &Model, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO1, ops::mo1(model, rng))
}

pub fn mo2_change_shape_dim(model: &Model, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO2, ops::mo2(model, rng))
}

pub fn mo3_series_add_delete(model: &Model, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO3, ops::mo3(model, rng))
}

/// MO3 restricted to insertion.
pub fn mo3_series_add(model: &Model, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO3, ops::mo3_add(model, rng))
}

/// MO3 restricted to deletion.
pub fn mo3_series_delete(model: &Model, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO3, ops::mo3_delete(model, rng))
}

pub fn mo4_parallel_add_delete(model: &Model, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO4, ops::mo4(model, rng))
}

pub fn mo4_parallel_add(model: &Model, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO4, ops::mo4_add(model, rng))
}

pub fn mo4_parallel_delete(model: &Model, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO4, ops::mo4_delete(model, rng))
}

pub fn mo5_change_param(model: &Model, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO5, ops::mo5(model, rng))
}

/// MO5 against a custom value table.
pub fn mo5_change_param_with(model: &Model, table: &MutationTable, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO5, ops::mo5_with(model, table, rng))
}

pub fn mo6_change_loss(model: &Model, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO6, ops::mo6(model, rng))
}

pub fn mo7_change_optimizer(model: &Model, rng: &mut impl Rng) -> MutationOutcome {
    outcome(OpId::MO7, ops::mo7(model, rng))
}

pub struct MutationOperator {
    pub op_id: OpId,
    pub description: &'static str,
    /// Cheap static pre-check; `false` guarantees `no-applicable-site`.
    pub applicability: fn(&Model) -> bool,
}

fn any_kind(model: &Model, kinds: &[LayerKind]) -> bool {
    model.nodes.values().any(|n| kinds.contains(&n.kind))
}

/// The seven registered operators, in id order.
pub fn registry() -> [MutationOperator; 7] {
    use LayerKind::*;
    let op = |op_id: OpId, applicability: fn(&Model) -> bool| MutationOperator {
        op_id,
        description: op_id.description(),
        applicability,
    };
    [
        op(OpId::MO1, |m| any_kind(m, &[Conv2d, Dense, ReLU, Sigmoid, MaxPool, AvgPool])),
        op(OpId::MO2, |m| any_kind(m, &[Conv2d, Dense])),
        op(OpId::MO3, |m| m.metadata.depth >= 2),
        op(OpId::MO4, |m| any_kind(m, &[Add, Concat])),
        op(OpId::MO5, |m| any_kind(m, &[Conv2d, Dense, MaxPool, AvgPool, BatchNorm])),
        op(OpId::MO6, |_| true),
        op(OpId::MO7, |_| true),
    ]
}

/// Apply `op` to `model` with a generator derived from `seed`.
///
/// On success the mutant's lineage records the op and carries the parent's
/// selection counters plus this selection. Panics inside an operator become
/// `structural-crash`.
pub fn apply(op: OpId, model: &Model, seed: u64) -> MutationOutcome {
    let mut r = rng::stream(seed, &format!("mutate/{op}"));
    let run = catch_unwind(AssertUnwindSafe(|| match op {
        OpId::MO1 => ops::mo1(model, &mut r),
        OpId::MO2 => ops::mo2(model, &mut r),
        OpId::MO3 => ops::mo3(model, &mut r),
        OpId::MO4 => ops::mo4(model, &mut r),
        OpId::MO5 => ops::mo5(model, &mut r),
        OpId::MO6 => ops::mo6(model, &mut r),
        OpId::MO7 => ops::mo7(model, &mut r),
    }));
    let draft = match run {
        Ok(Ok(d)) => d,
        Ok(Err(e)) => return MutationOutcome::rejected(op, e),
        Err(_) => return MutationOutcome::rejected(op, Rejection::StructuralCrash),
    };
    let mut m = draft.model;
    m.lineage.mutation_history.push(op);
    m.lineage.record_selection(op);
    m.refresh_metadata();
    if !validate_graph(&m).is_empty() {
        return MutationOutcome::rejected(op, Rejection::ShapeInfeasible);
    }
    MutationOutcome::mutated(op, m, draft.site)
}

/// Constraint breaches visible from the mutant and its lineage alone
/// (MC2–MC6). An empty list means the mutant is sound.
pub fn audit(model: &Model) -> Vec<String> {
    let table = MutationTable::builtin();
    let lin = &model.lineage;
    let mut out = Vec::new();

    let mut anchors: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for e in &lin.edits {
        if let EditRecord::Resize { node, param, old, new } = e {
            let anchor = *anchors.entry((node, param)).or_insert(*old);
            let (lo, hi) = extent_range(anchor);
            if *new < lo || *new > hi {
                out.push(format!("MC2: {node}.{param}={new} outside [{lo},{hi}] of {anchor}"));
            }
        }
    }
    for ((node, param), anchor) in &anchors {
        if let Some(n) = model.nodes.get(*node) {
            let v = n.int(param);
            let (lo, hi) = extent_range(*anchor);
            if v < lo || v > hi {
                out.push(format!("MC2: {node}.{param}={v} outside [{lo},{hi}]"));
            }
        }
    }

    let series: usize = lin
        .edits
        .iter()
        .map(|e| match e {
            EditRecord::SeriesAdd { nodes, .. } | EditRecord::SeriesDelete { nodes } => nodes.len(),
            _ => 0,
        })
        .sum();
    if series != lin.series_edits {
        out.push(format!("MC3: series edits {} but records sum to {series}", lin.series_edits));
    }
    if lin.series_edits > lin.series_budget() {
        out.push(format!("MC3: {} series edits over budget {}", lin.series_edits, lin.series_budget()));
    }
    for e in lin.latest_edits() {
        let EditRecord::SeriesAdd { nodes, .. } = e else { continue };
        let (Some(first), Some(last)) = (nodes.first(), nodes.last()) else { continue };
        let (Some(f), Some(l)) = (model.nodes.get(first), model.nodes.get(last)) else { continue };
        let clash = model.preds(first).iter().any(|p| model.nodes[*p].kind == f.kind)
            || model.succs(last).iter().any(|s| model.nodes[*s].kind == l.kind);
        if clash {
            out.push(format!("MC3: inserted {first}..{last} sits next to an identical kind"));
        }
    }

    let mut adds: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &lin.edits {
        if let EditRecord::BranchAdd { site, .. } = e {
            *adds.entry(site).or_insert(0) += 1;
        }
    }
    for (site, n) in &adds {
        if *n > 2 {
            out.push(format!("MC4: {n} branches added at {site}"));
        }
        if lin.branch_adds.get(*site).copied().unwrap_or(0) != *n {
            out.push(format!("MC4: branch counter at {site} disagrees with records"));
        }
    }

    for e in &lin.edits {
        let EditRecord::Param { node, param, new, .. } = e else { continue };
        let domain = if node == LOSS_SITE {
            table.loss_domain(model.loss.kind, param).or_else(|| {
                // The loss kind may have been swapped since.
                crate::graph::LossKind::ALL.iter().find_map(|k| table.loss_domain(*k, param))
            })
        } else if node == OPTIMIZER_SITE {
            table.optimizer_domain(param)
        } else {
            model.nodes.get(node).and_then(|n| table.layer_domain(n.kind, param))
        };
        match domain {
            Some(d) if d.contains(*new) => {}
            Some(_) => out.push(format!("MC5: {node}.{param}={new} outside its table")),
            None if node == LOSS_SITE || node == OPTIMIZER_SITE || model.nodes.contains_key(node) => {
                out.push(format!("MC5: {node}.{param} is not a table parameter"))
            }
            None => {}
        }
    }
    for (id, n) in &model.nodes {
        for p in table.layer_params(n.kind) {
            let edited = lin
                .edits
                .iter()
                .any(|e| matches!(e, EditRecord::Param { node, param, .. } if node == id && *param == p.param));
            let v = n.params.get(&p.param).map(|v| v.as_f64()).unwrap_or(0.0);
            if edited && !p.domain.contains(v) {
                out.push(format!("MC5: {id}.{}={v} outside its table", p.param));
            }
        }
    }

    for e in &lin.edits {
        if let EditRecord::Loss { from, to } = e {
            let task = |s: &str| crate::graph::LossKind::from_name(s).map(|k| k.task());
            if task(from) != task(to) {
                out.push(format!("MC6: loss {from} -> {to} crosses tasks"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;

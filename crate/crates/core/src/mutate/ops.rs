use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::surgery::{self, Region};
use super::table::{extent_range, Domain, MutationTable};
use super::{Constraint, Draft, Rejection};
use crate::graph::{
    catalog_candidates, validate_graph, EditRecord, FunctionalityClass, LayerKind, LayerNode, LossSpec, Model,
    OptimizerSpec, ParamValue, SlotContext, SlotSpec, StructureCatalog, TensorSpec, Template, Tier,
};

/// Largest region MO1 will replace.
const MAX_REGION: usize = 8;
/// Extent values tried per resize site.
const EXTENT_DRAWS: usize = 6;

/// Keeps the most specific reason among failed attempts.
#[derive(Default)]
struct Failures(Option<Rejection>);

impl Failures {
    fn note(&mut self, r: Rejection) {
        if self.0.as_ref().is_none_or(|cur| r.rank() > cur.rank()) {
            self.0 = Some(r);
        }
    }

    fn into_err(self) -> Rejection {
        self.0.unwrap_or(Rejection::NoApplicableSite)
    }
}

/// Refresh and check a candidate: valid and with the original output contract.
pub(crate) fn finish(original: &Model, mut cand: Model) -> Option<Model> {
    cand.refresh_metadata();
    let ok = validate_graph(&cand).is_empty() && surgery::sink_spec(&cand) == surgery::sink_spec(original);
    ok.then_some(cand)
}

fn draft(original: &Model, mut cand: Model, edits: Vec<EditRecord>, site: String) -> Option<Draft> {
    cand.lineage.record_edits(edits);
    finish(original, cand).map(|model| Draft { model, site })
}

fn content(nodes: impl Iterator<Item = LayerNode>) -> Vec<(LayerKind, String)> {
    let mut v: Vec<_> = nodes.map(|n| (n.kind, format!("{:?}", n.params))).collect();
    v.sort();
    v
}

fn region_class(model: &Model, r: &Region) -> Option<FunctionalityClass> {
    let kinds: Vec<LayerKind> = r.nodes.iter().map(|id| model.nodes[id].kind).collect();
    if kinds.iter().any(|k| matches!(k, LayerKind::Conv2d | LayerKind::Dense)) {
        return Some(FunctionalityClass::FeatureExtraction);
    }
    let c = kinds[0].class();
    kinds.iter().all(|k| k.class() == c).then_some(c)
}

pub(crate) fn mo1(model: &Model, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    let specs = surgery::specs(model).ok_or(Rejection::ShapeInfeasible)?;
    let mut regions = surgery::regions(model, MAX_REGION);
    regions.shuffle(rng);
    for r in regions {
        let Some(class) = region_class(model, &r) else { continue };
        if model.preds(&r.entry).len() > 1 {
            continue;
        }
        let mut slot = SlotSpec::new(surgery::input_of(model, &specs, &r.entry), specs[&r.exit].clone());
        if r.nodes.len() == 1 && class == FunctionalityClass::Pooling {
            let n = &model.nodes[&r.entry];
            slot.kernel = Some(n.int("kernel_size"));
            slot.stride = Some(n.int("stride"));
        }
        let ctx = slot.context();
        let current = content(r.nodes.iter().map(|id| model.nodes[id].clone()));
        let mut cands: Vec<(&Template, Model)> = catalog_candidates(class, &slot)
            .into_iter()
            .filter_map(|t| t.instantiate(&ctx).ok().map(|m| (t, m)))
            .filter(|(_, m)| content(m.nodes.values().cloned()) != current)
            .collect();
        cands.shuffle(rng);
        for (t, part) in cands {
            let prefix = surgery::fresh_prefix(model, "rep");
            let (cand, added) = surgery::splice(model, &r, &part, &prefix);
            let removed: Vec<String> = r.nodes.iter().cloned().collect();
            let site = format!("{}..{} -> {}", r.entry, r.exit, t.name);
            let edit = EditRecord::Replace {
                removed,
                added,
                template: t.name.clone(),
            };
            if let Some(d) = draft(model, cand, vec![edit], site) {
                return Ok(d);
            }
        }
    }
    Err(Rejection::NoApplicableSite)
}

fn extent_param(kind: LayerKind) -> Option<&'static str> {
    match kind {
        LayerKind::Conv2d => Some("out_channels"),
        LayerKind::Dense => Some("units"),
        _ => None,
    }
}

/// Extent of `node.param` before its first resize in the lineage.
pub(crate) fn extent_anchor(model: &Model, node: &str, param: &str) -> Option<usize> {
    let first = model.lineage.edits.iter().find_map(|e| match e {
        EditRecord::Resize { node: n, param: p, old, .. } if n == node && p == param => Some(*old),
        _ => None,
    });
    first.or_else(|| model.nodes.get(node).map(|n| n.int(param)))
}

fn extent_draws(anchor: usize, current: usize, rng: &mut impl Rng) -> Vec<usize> {
    let (lo, hi) = extent_range(anchor);
    if hi - lo < 4 * EXTENT_DRAWS {
        let mut all: Vec<usize> = (lo..=hi).filter(|v| *v != current).collect();
        all.shuffle(rng);
        all.truncate(EXTENT_DRAWS);
        return all;
    }
    let mut out = Vec::new();
    while out.len() < EXTENT_DRAWS {
        let v = rng.gen_range(lo..=hi);
        if v != current && !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn with_param(model: &Model, node: &str, param: &str, v: ParamValue) -> Model {
    let mut m = model.clone();
    m.nodes.get_mut(node).unwrap().params.insert(param.to_string(), v);
    m
}

fn adapter(model: &Model, node: &str, extent: usize, rank: usize) -> (Model, String) {
    let prefix = surgery::fresh_prefix(model, "ad");
    let text = if rank == 4 {
        format!("input f32[1,1,1,1]\nlayer p Conv2d out_channels={extent} kernel_size=1\n")
    } else {
        format!("input f32[1,1]\nlayer p Dense units={extent}\n")
    };
    let part = crate::graph::parse_model_dsl(&text).expect("adapter parses");
    let (m, ids) = surgery::insert_after(model, Some(node), &part, &prefix);
    (m, ids[0].clone())
}

pub(crate) fn mo2(model: &Model, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    let specs = surgery::specs(model).ok_or(Rejection::ShapeInfeasible)?;
    let mut sites: Vec<(&str, &'static str)> = model
        .nodes
        .values()
        .filter_map(|n| extent_param(n.kind).map(|p| (n.id.as_str(), p)))
        .collect();
    if sites.is_empty() {
        return Err(Rejection::NoApplicableSite);
    }
    sites.shuffle(rng);
    for (id, param) in sites {
        let current = model.nodes[id].int(param);
        let anchor = extent_anchor(model, id, param).unwrap_or(current);
        for v in extent_draws(anchor, current, rng) {
            let resize = EditRecord::Resize {
                node: id.into(),
                param: param.into(),
                old: current,
                new: v,
            };
            let cand = with_param(model, id, param, ParamValue::Int(v as i64));
            let site = format!("{id}.{param} {current}->{v}");
            if let Some(d) = draft(model, cand.clone(), vec![resize.clone()], site.clone()) {
                return Ok(d);
            }
            let (cand, ad) = adapter(&cand, id, current, specs[id].rank());
            let edits = vec![resize, EditRecord::Adapter { nodes: vec![ad] }];
            if let Some(d) = draft(model, cand, edits, format!("{site} +adapter")) {
                return Ok(d);
            }
        }
    }
    Err(Rejection::ShapeInfeasible)
}

/// Cascade and basic templates that preserve `spec`, instantiated.
fn series_parts(spec: &TensorSpec) -> Vec<(&'static Template, Model)> {
    let ctx = SlotContext {
        input: spec.clone(),
        out: spec.channels(),
        kernel: 2,
        stride: 2,
    };
    StructureCatalog::builtin()
        .templates
        .iter()
        .filter(|t| t.tier != Tier::Backbone && t.arity == 1)
        .filter(|t| t.output_for(&ctx).as_ref() == Some(spec))
        .filter_map(|t| t.instantiate(&ctx).ok().map(|m| (t, m)))
        .collect()
}

fn endpoint_kinds(part: &Model) -> (LayerKind, LayerKind) {
    let order = part.topo_order().unwrap();
    (part.nodes[&order[0]].kind, part.nodes[&order[order.len() - 1]].kind)
}

/// MC3 adjacency: the inserted entry may not repeat the kind before it, nor the exit the kinds after it.
fn adjacency_ok(model: &Model, after: Option<&str>, part: &Model) -> bool {
    let (first, last) = endpoint_kinds(part);
    let before_ok = after.is_none_or(|a| model.nodes[a].kind != first);
    let next: Vec<&str> = match after {
        Some(a) => model.succs(a),
        None => model.source().into_iter().collect(),
    };
    before_ok && next.iter().all(|s| model.nodes[*s].kind != last)
}

fn series_add_draft(
    model: &Model,
    after: Option<&str>,
    t: &Template,
    part: &Model,
) -> Result<Draft, Rejection> {
    if part.nodes.len() > model.lineage.series_remaining() || !adjacency_ok(model, after, part) {
        return Err(Rejection::ConstraintViolation(Constraint::MC3));
    }
    let prefix = surgery::fresh_prefix(model, "ser");
    let (mut cand, nodes) = surgery::insert_after(model, after, part, &prefix);
    cand.lineage.series_edits += nodes.len();
    let site = format!("after {} + {}", after.unwrap_or("input"), t.name);
    let edit = EditRecord::SeriesAdd {
        nodes,
        template: t.name.clone(),
    };
    draft(model, cand, vec![edit], site).ok_or(Rejection::ShapeInfeasible)
}

/// Insert the named catalog structure after `after` (or at the input).
pub fn series_insert(model: &Model, after: Option<&str>, template: &str) -> Result<Model, Rejection> {
    let specs = surgery::specs(model).ok_or(Rejection::ShapeInfeasible)?;
    let spec = after.map(|a| specs[a].clone()).unwrap_or_else(|| model.input_spec.clone());
    let t = StructureCatalog::builtin().get(template).ok_or(Rejection::NoApplicableSite)?;
    let ctx = SlotContext {
        input: spec.clone(),
        out: spec.channels(),
        kernel: 2,
        stride: 2,
    };
    let part = t.instantiate(&ctx).map_err(|_| Rejection::ShapeInfeasible)?;
    series_add_draft(model, after, t, &part).map(|d| d.model)
}

pub(crate) fn mo3_add(model: &Model, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    if model.lineage.series_remaining() == 0 {
        return Err(Rejection::ConstraintViolation(Constraint::MC3));
    }
    let specs = surgery::specs(model).ok_or(Rejection::ShapeInfeasible)?;
    let mut cache: BTreeMap<String, Vec<(&'static Template, Model)>> = BTreeMap::new();
    let mut pairs = Vec::new();
    let sites: Vec<Option<&str>> = std::iter::once(None)
        .chain(model.nodes.keys().map(|k| Some(k.as_str())))
        .collect();
    for after in sites {
        let spec = after.map(|a| specs[a].clone()).unwrap_or_else(|| model.input_spec.clone());
        let parts = cache.entry(spec.to_string()).or_insert_with(|| series_parts(&spec));
        for i in 0..parts.len() {
            pairs.push((after, spec.to_string(), i));
        }
    }
    pairs.shuffle(rng);
    let mut fails = Failures::default();
    for (after, key, i) in pairs {
        let (t, part) = &cache[&key][i];
        match series_add_draft(model, after, t, part) {
            Ok(d) => return Ok(d),
            Err(r) => fails.note(r),
        }
    }
    Err(fails.into_err())
}

pub(crate) fn mo3_delete(model: &Model, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    let mut runs = surgery::repeated_runs(model);
    if runs.is_empty() {
        return Err(Rejection::NoApplicableSite);
    }
    runs.shuffle(rng);
    let mut fails = Failures::default();
    for run in runs {
        if run.len() > model.lineage.series_remaining() {
            fails.note(Rejection::ConstraintViolation(Constraint::MC3));
            continue;
        }
        let mut cand = surgery::remove_run(model, &run);
        cand.lineage.series_edits += run.len();
        let site = format!("delete {}", run.join(","));
        match draft(model, cand, vec![EditRecord::SeriesDelete { nodes: run }], site) {
            Some(d) => return Ok(d),
            None => fails.note(Rejection::ShapeInfeasible),
        }
    }
    Err(fails.into_err())
}

fn either(
    model: &Model,
    rng: &mut impl Rng,
    a: fn(&Model, &mut ChaCha8Rng) -> Result<Draft, Rejection>,
    b: fn(&Model, &mut ChaCha8Rng) -> Result<Draft, Rejection>,
) -> Result<Draft, Rejection> {
    let mut sub = ChaCha8Rng::seed_from_u64(rng.gen());
    let (first, second) = if sub.gen_bool(0.5) { (a, b) } else { (b, a) };
    let mut fails = Failures::default();
    for f in [first, second] {
        match f(model, &mut sub) {
            Ok(d) => return Ok(d),
            Err(r) => fails.note(r),
        }
    }
    Err(fails.into_err())
}

pub(crate) fn mo3(model: &Model, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    if model.lineage.series_remaining() == 0 {
        return Err(Rejection::ConstraintViolation(Constraint::MC3));
    }
    either(model, rng, mo3_add, mo3_delete)
}

fn merge_sites(model: &Model) -> Vec<(String, String)> {
    let idoms = surgery::idoms(model);
    model
        .nodes
        .values()
        .filter(|n| n.kind.is_merge())
        .filter_map(|n| idoms[&n.id].clone().map(|f| (n.id.clone(), f)))
        .collect()
}

pub(crate) fn mo4_add(model: &Model, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    let specs = surgery::specs(model).ok_or(Rejection::ShapeInfeasible)?;
    let mut sites = merge_sites(model);
    if sites.is_empty() {
        return Err(Rejection::NoApplicableSite);
    }
    sites.shuffle(rng);
    let mut fails = Failures::default();
    for (m, fork) in sites {
        if model.lineage.branch_adds.get(&m).copied().unwrap_or(0) >= 2 {
            fails.note(Rejection::ConstraintViolation(Constraint::MC4));
            continue;
        }
        let want = specs[model.preds(&m)[0]].clone();
        let slot = SlotSpec::new(specs[&fork].clone(), want);
        let ctx = slot.context();
        let mut parts: Vec<(&Template, Model)> = StructureCatalog::builtin()
            .templates
            .iter()
            .filter(|t| t.tier != Tier::Backbone && t.arity == 1)
            .filter(|t| t.output_for(&ctx).as_ref() == Some(&slot.output))
            .filter_map(|t| t.instantiate(&ctx).ok().map(|p| (t, p)))
            .collect();
        if parts.is_empty() {
            fails.note(Rejection::NoApplicableSite);
            continue;
        }
        parts.shuffle(rng);
        for (t, part) in parts {
            let prefix = surgery::fresh_prefix(model, "br");
            let mut cand = model.clone();
            let nodes = surgery::import(&mut cand, &part, &prefix);
            cand.edges.push((fork.clone(), nodes[0].clone()));
            cand.edges.push((nodes[nodes.len() - 1].clone(), m.clone()));
            *cand.lineage.branch_adds.entry(m.clone()).or_insert(0) += 1;
            let site = format!("{fork}=>{m} + {}", t.name);
            let edit = EditRecord::BranchAdd {
                site: m.clone(),
                nodes,
                template: t.name.clone(),
            };
            match draft(model, cand, vec![edit], site) {
                Some(d) => return Ok(d),
                None => fails.note(Rejection::ShapeInfeasible),
            }
        }
    }
    Err(fails.into_err())
}

pub(crate) fn mo4_delete(model: &Model, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    let mut sites = merge_sites(model);
    sites.retain(|(m, _)| model.preds(m).len() >= 2);
    if sites.is_empty() {
        return Err(Rejection::NoApplicableSite);
    }
    sites.shuffle(rng);
    let mut fails = Failures::default();
    for (m, fork) in sites {
        let mut idx: Vec<usize> = (0..model.preds(&m).len()).collect();
        idx.shuffle(rng);
        for i in idx {
            let Some(branch) = surgery::branch_nodes(model, &m, i, &fork) else {
                fails.note(Rejection::NoApplicableSite);
                continue;
            };
            let cand = surgery::remove_branch(model, &m, i, &branch);
            let site = format!("{m} input {i}");
            let edit = EditRecord::BranchDelete {
                site: m.clone(),
                nodes: branch,
            };
            match draft(model, cand, vec![edit], site) {
                Some(d) => return Ok(d),
                None => fails.note(Rejection::ShapeInfeasible),
            }
        }
    }
    Err(fails.into_err())
}

pub(crate) fn mo4(model: &Model, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    either(model, rng, mo4_add, mo4_delete)
}

/// Parameter change drawing from `table`.
pub(crate) fn mo5_with(model: &Model, table: &MutationTable, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    let mut sites: Vec<(String, String, Domain)> = model
        .nodes
        .values()
        .flat_map(|n| {
            table
                .layer_params(n.kind)
                .map(|p| (n.id.clone(), p.param.clone(), p.domain.clone()))
                .collect::<Vec<_>>()
        })
        .collect();
    if sites.is_empty() {
        return Err(Rejection::NoApplicableSite);
    }
    sites.shuffle(rng);
    let mut fails = Failures::default();
    for (id, param, domain) in sites {
        let node = &model.nodes[&id];
        let old = node.params.get(&param).map(|v| v.as_f64()).unwrap_or(0.0);
        let tries: Vec<(ParamValue, EditRecord)> = match &domain {
            Domain::Values(vs) => {
                let mut vs: Vec<i64> = vs.iter().copied().filter(|v| *v as f64 != old).collect();
                vs.shuffle(rng);
                vs.into_iter()
                    .map(|v| {
                        let e = EditRecord::Param {
                            node: id.clone(),
                            param: param.clone(),
                            old,
                            new: v as f64,
                        };
                        (ParamValue::Int(v), e)
                    })
                    .collect()
            }
            Domain::Range { .. } => {
                let v = domain.draw_float(rng);
                if v == old {
                    Vec::new()
                } else {
                    let e = EditRecord::Param {
                        node: id.clone(),
                        param: param.clone(),
                        old,
                        new: v,
                    };
                    vec![(ParamValue::Float(v), e)]
                }
            }
            Domain::Extent => {
                let cur = old as usize;
                let anchor = extent_anchor(model, &id, &param).unwrap_or(cur);
                extent_draws(anchor, cur, rng)
                    .into_iter()
                    .map(|v| {
                        let e = EditRecord::Resize {
                            node: id.clone(),
                            param: param.clone(),
                            old: cur,
                            new: v,
                        };
                        (ParamValue::Int(v as i64), e)
                    })
                    .collect()
            }
        };
        if tries.is_empty() {
            fails.note(Rejection::NoApplicableSite);
            continue;
        }
        for (v, edit) in tries {
            let cand = with_param(model, &id, &param, v);
            let site = format!("{id}.{param} {old}->{v}");
            match draft(model, cand, vec![edit], site) {
                Some(d) => return Ok(d),
                None => fails.note(Rejection::ShapeInfeasible),
            }
        }
    }
    Err(fails.into_err())
}

pub(crate) fn mo5(model: &Model, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    mo5_with(model, MutationTable::builtin(), rng)
}

/// Label used in edit records for loss and optimizer parameters.
pub const LOSS_SITE: &str = "@loss";
pub const OPTIMIZER_SITE: &str = "@optimizer";

fn redraws(params: &crate::graph::Params, domain_of: impl Fn(&str) -> Option<Domain>) -> Vec<(String, Domain, f64)> {
    params
        .iter()
        .filter_map(|(k, v)| domain_of(k).map(|d| (k.clone(), d, v.as_f64())))
        .collect()
}

enum ScriptMove<K> {
    Swap(K),
    Redraw(String, Domain, f64),
}

pub(crate) fn mo6(model: &Model, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    let table = MutationTable::builtin();
    let kind = model.loss.kind;
    let mut moves: Vec<ScriptMove<crate::graph::LossKind>> = table
        .losses_for(kind.task())
        .iter()
        .filter(|k| **k != kind)
        .map(|k| ScriptMove::Swap(*k))
        .collect();
    for (p, d, old) in redraws(&model.loss.params, |p| table.loss_domain(kind, p).cloned()) {
        moves.push(ScriptMove::Redraw(p, d, old));
    }
    if moves.is_empty() {
        return Err(Rejection::NoApplicableSite);
    }
    moves.shuffle(rng);
    for mv in moves {
        let mut cand = model.clone();
        let (edit, site) = match mv {
            ScriptMove::Swap(k) => {
                cand.loss = LossSpec::new(k);
                let e = EditRecord::Loss {
                    from: kind.name().into(),
                    to: k.name().into(),
                };
                (e, format!("loss {} -> {}", kind.name(), k.name()))
            }
            ScriptMove::Redraw(p, d, old) => {
                let v = d.draw_float(rng);
                if v == old {
                    continue;
                }
                cand.loss.params.insert(p.clone(), ParamValue::Float(v));
                let site = format!("loss.{p} {old}->{v}");
                let e = EditRecord::Param {
                    node: LOSS_SITE.into(),
                    param: p,
                    old,
                    new: v,
                };
                (e, site)
            }
        };
        if let Some(d) = draft(model, cand, vec![edit], site) {
            return Ok(d);
        }
    }
    Err(Rejection::NoApplicableSite)
}

pub(crate) fn mo7(model: &Model, rng: &mut impl Rng) -> Result<Draft, Rejection> {
    let table = MutationTable::builtin();
    let kind = model.optimizer.kind;
    let mut moves: Vec<ScriptMove<crate::graph::OptimizerKind>> = crate::graph::OptimizerKind::ALL
        .iter()
        .filter(|k| **k != kind)
        .map(|k| ScriptMove::Swap(*k))
        .collect();
    for (p, d, old) in redraws(&model.optimizer.params, |p| table.optimizer_domain(p).cloned()) {
        moves.push(ScriptMove::Redraw(p, d, old));
    }
    if moves.is_empty() {
        return Err(Rejection::NoApplicableSite);
    }
    moves.shuffle(rng);
    for mv in moves {
        let mut cand = model.clone();
        let (edit, site) = match mv {
            ScriptMove::Swap(k) => {
                let lr = model.optimizer.params.get("learning_rate").copied();
                cand.optimizer = OptimizerSpec::new(k);
                if let Some(lr) = lr {
                    cand.optimizer.params.insert("learning_rate".into(), lr);
                }
                let e = EditRecord::Optimizer {
                    from: kind.name().into(),
                    to: k.name().into(),
                };
                (e, format!("optimizer {} -> {}", kind.name(), k.name()))
            }
            ScriptMove::Redraw(p, d, old) => {
                let v = d.draw_float(rng);
                if v == old {
                    continue;
                }
                cand.optimizer.params.insert(p.clone(), ParamValue::Float(v));
                let site = format!("optimizer.{p} {old}->{v}");
                let e = EditRecord::Param {
                    node: OPTIMIZER_SITE.into(),
                    param: p,
                    old,
                    new: v,
                };
                (e, site)
            }
        };
        if let Some(d) = draft(model, cand, vec![edit], site) {
            return Ok(d);
        }
    }
    Err(Rejection::NoApplicableSite)
}

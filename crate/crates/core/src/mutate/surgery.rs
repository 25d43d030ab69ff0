//! Structural edits shared by the operators: region discovery, splicing,
//! series insertion and deletion, branch bookkeeping.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::{infer_shapes, LayerKind, LayerNode, Model, TensorSpec};

/// A single-entry single-exit subgraph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Region {
    pub entry: String,
    pub exit: String,
    pub nodes: BTreeSet<String>,
}

/// Output spec of every node plus the model input under the key `""`.
pub(crate) fn specs(model: &Model) -> Option<BTreeMap<String, TensorSpec>> {
    let mut s = infer_shapes(model).ok()?;
    s.insert(String::new(), model.input_spec.clone());
    Some(s)
}

pub(crate) fn sink_spec(model: &Model) -> Option<TensorSpec> {
    let sink = model.sink()?.to_string();
    infer_shapes(model).ok()?.remove(&sink)
}

/// Spec flowing into `id` (its first predecessor, or the model input).
pub(crate) fn input_of(model: &Model, specs: &BTreeMap<String, TensorSpec>, id: &str) -> TensorSpec {
    model
        .preds(id)
        .first()
        .map(|p| specs[*p].clone())
        .unwrap_or_else(|| model.input_spec.clone())
}

/// Prefix `{stem}{k}_` not used by any node, past or present.
pub(crate) fn fresh_prefix(model: &Model, stem: &str) -> String {
    let used: BTreeSet<&str> = model
        .nodes
        .keys()
        .map(String::as_str)
        .chain(model.lineage.edits.iter().flat_map(|e| e.nodes()))
        .collect();
    let mut k = model.lineage.mutation_history.len() + 1;
    loop {
        let p = format!("{stem}{k}_");
        if !used.iter().any(|id| id.starts_with(&p)) {
            return p;
        }
        k += 1;
    }
}

/// Copy `part`'s nodes and edges into `model` under `prefix`; returns the
/// renamed ids in topological order (first is the source, last the sink).
pub(crate) fn import(model: &mut Model, part: &Model, prefix: &str) -> Vec<String> {
    let order = part.topo_order().expect("template is acyclic");
    let rename = |id: &str| format!("{prefix}{id}");
    for id in &order {
        let n = &part.nodes[id];
        let mut node = LayerNode::new(rename(id), n.kind, n.params.clone());
        node.id = rename(id);
        model.nodes.insert(node.id.clone(), node);
    }
    for (s, t) in &part.edges {
        model.edges.push((rename(s), rename(t)));
    }
    order.iter().map(|id| rename(id)).collect()
}

fn reach(model: &Model, start: &str, forward: bool) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![start.to_string()];
    while let Some(x) = stack.pop() {
        if !seen.insert(x.clone()) {
            continue;
        }
        let next = if forward { model.succs(&x) } else { model.preds(&x) };
        stack.extend(next.into_iter().map(str::to_string));
    }
    seen
}

/// All single-entry single-exit regions of at most `max_nodes` nodes.
pub(crate) fn regions(model: &Model, max_nodes: usize) -> Vec<Region> {
    let Some(order) = model.topo_order() else { return Vec::new() };
    let desc: BTreeMap<&str, BTreeSet<String>> = order.iter().map(|u| (u.as_str(), reach(model, u, true))).collect();
    let anc: BTreeMap<&str, BTreeSet<String>> = order.iter().map(|u| (u.as_str(), reach(model, u, false))).collect();
    let mut out = Vec::new();
    for u in &order {
        for v in &order {
            if !desc[u.as_str()].contains(v) {
                continue;
            }
            let nodes: BTreeSet<String> = desc[u.as_str()].intersection(&anc[v.as_str()]).cloned().collect();
            if nodes.len() > max_nodes {
                continue;
            }
            let closed = nodes.iter().all(|x| {
                (x == u || model.preds(x).iter().all(|p| nodes.contains(*p)))
                    && (x == v || model.succs(x).iter().all(|s| nodes.contains(*s)))
            });
            if closed {
                out.push(Region {
                    entry: u.clone(),
                    exit: v.clone(),
                    nodes,
                });
            }
        }
    }
    out
}

/// Replace `region` with `part`; returns the mutant and the imported ids.
pub(crate) fn splice(model: &Model, region: &Region, part: &Model, prefix: &str) -> (Model, Vec<String>) {
    let mut m = model.clone();
    m.nodes.retain(|id, _| !region.nodes.contains(id));
    m.edges.clear();
    let ids = import(&mut m, part, prefix);
    let inner = std::mem::take(&mut m.edges);
    let (src, sink) = (ids[0].clone(), ids[ids.len() - 1].clone());
    for (s, t) in &model.edges {
        match (region.nodes.contains(s), region.nodes.contains(t)) {
            (true, true) => {}
            (false, true) => m.edges.push((s.clone(), src.clone())),
            (true, false) => m.edges.push((sink.clone(), t.clone())),
            (false, false) => m.edges.push((s.clone(), t.clone())),
        }
    }
    m.edges.extend(inner);
    (m, ids)
}

/// Insert `part` in series after `after` (or before the source when `None`).
pub(crate) fn insert_after(model: &Model, after: Option<&str>, part: &Model, prefix: &str) -> (Model, Vec<String>) {
    let mut m = model.clone();
    let old_source = model.source().map(str::to_string);
    let ids = import(&mut m, part, prefix);
    let (src, sink) = (ids[0].clone(), ids[ids.len() - 1].clone());
    match after {
        Some(a) => {
            for e in m.edges.iter_mut() {
                if e.0 == a && !ids.contains(&e.1) {
                    e.0 = sink.clone();
                }
            }
            m.edges.push((a.to_string(), src));
        }
        None => {
            if let Some(o) = old_source {
                m.edges.push((sink, o));
            }
        }
    }
    (m, ids)
}

/// Remove a linear run of nodes, reconnecting its predecessor to its successors.
pub(crate) fn remove_run(model: &Model, run: &[String]) -> Model {
    let mut m = model.clone();
    let set: BTreeSet<&String> = run.iter().collect();
    let pred = model.preds(&run[0]).first().map(|p| p.to_string());
    let last = &run[run.len() - 1];
    m.nodes.retain(|id, _| !set.contains(id));
    m.edges.clear();
    for (s, t) in &model.edges {
        if set.contains(t) {
            continue;
        }
        if s == last {
            if let Some(p) = &pred {
                m.edges.push((p.clone(), t.clone()));
            }
        } else if !set.contains(s) {
            m.edges.push((s.clone(), t.clone()));
        }
    }
    m
}

/// Maximal linear runs: consecutive nodes joined by a sole edge.
pub(crate) fn chains(model: &Model) -> Vec<Vec<String>> {
    let Some(order) = model.topo_order() else { return Vec::new() };
    let linked = |x: &str| -> Option<String> {
        let s = model.succs(x);
        (s.len() == 1 && model.preds(s[0]).len() == 1).then(|| s[0].to_string())
    };
    let has_link_in = |x: &str| {
        let p = model.preds(x);
        p.len() == 1 && model.succs(p[0]).len() == 1
    };
    let mut out = Vec::new();
    for start in order.iter().filter(|x| !has_link_in(x)) {
        let mut run = vec![start.clone()];
        while let Some(n) = linked(run.last().unwrap()) {
            run.push(n);
        }
        out.push(run);
    }
    out
}

/// Runs of 1..=4 nodes that repeat back to back (same kind sequence) inside a chain.
pub(crate) fn repeated_runs(model: &Model) -> Vec<Vec<String>> {
    let kinds = |run: &[String]| run.iter().map(|id| model.nodes[id].kind).collect::<Vec<LayerKind>>();
    let mut out: Vec<Vec<String>> = Vec::new();
    for chain in chains(model) {
        for len in 1..=4 {
            if chain.len() < 2 * len {
                continue;
            }
            for i in 0..=chain.len() - 2 * len {
                let a = &chain[i..i + len];
                let b = &chain[i + len..i + 2 * len];
                if kinds(a) == kinds(b) {
                    for run in [a.to_vec(), b.to_vec()] {
                        if !out.contains(&run) {
                            out.push(run);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Immediate dominator of every node; `None` means only the model input dominates it.
pub(crate) fn idoms(model: &Model) -> BTreeMap<String, Option<String>> {
    let order = model.topo_order().unwrap_or_default();
    let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut dom: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for id in &order {
        let preds = model.preds(id);
        let mut set: BTreeSet<&str> = match preds.split_first() {
            None => BTreeSet::new(),
            Some((first, rest)) => rest.iter().fold(dom[first].clone(), |acc, p| {
                acc.intersection(&dom[p]).copied().collect()
            }),
        };
        let idom = set.iter().max_by_key(|d| pos[*d]).map(|d| d.to_string());
        set.insert(id.as_str());
        dom.insert(id.as_str(), set);
        out.insert(id.clone(), idom);
    }
    out
}

/// Nodes of the branch feeding merge `m` through its `index`-th input, walking
/// back to `fork`; empty for a direct skip edge. `None` if the branch is not a
/// plain chain ending at the fork.
pub(crate) fn branch_nodes(model: &Model, m: &str, index: usize, fork: &str) -> Option<Vec<String>> {
    let preds = model.preds(m);
    let mut x = preds.get(index)?.to_string();
    let mut nodes = Vec::new();
    while x != fork {
        if model.succs(&x).len() != 1 || model.preds(&x).len() != 1 {
            return None;
        }
        nodes.push(x.clone());
        x = model.preds(&x)[0].to_string();
    }
    nodes.reverse();
    Some(nodes)
}

/// Drop the `index`-th input branch of merge `m`.
pub(crate) fn remove_branch(model: &Model, m: &str, index: usize, branch: &[String]) -> Model {
    let mut out = model.clone();
    let last = branch.last().cloned().unwrap_or_else(|| model.preds(m)[index].to_string());
    let set: BTreeSet<&String> = branch.iter().collect();
    out.nodes.retain(|id, _| !set.contains(id));
    let mut seen = 0;
    out.edges.retain(|(s, t)| {
        if set.contains(s) || set.contains(t) {
            return false;
        }
        if t == m {
            seen += 1;
            if seen - 1 == index && *s == last {
                return false;
            }
        }
        true
    });
    out
}

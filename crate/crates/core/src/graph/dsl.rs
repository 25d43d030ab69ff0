//! Line-oriented model DSL.
//!
//! ```text
//! # comment
//! input f32[8,1,12,12]
//! layer c1 Conv2d out_channels=4 kernel_size=3
//! layer r1 ReLU
//! edge c1 r1
//! loss CrossEntropy label_smoothing=0.0
//! optimizer SGD learning_rate=0.01
//! ```
//!
//! A document without any `edge` statement chains its layers in declaration
//! order. `loss` defaults to `CrossEntropy`, `optimizer` to `SGD`. Omitted
//! optional parameters take their schema defaults (padding 0, stride 1 for
//! convolutions, stride equal to the window for pooling).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{
    validate_graph, DType, DefaultValue, GraphError, LayerKind, LayerNode, Lineage, LossKind,
    LossSpec, Model, OptimizerKind, OptimizerSpec, ParamField, ParamType, ParamValue, Params,
    TensorSpec,
};

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in line.char_indices() {
        if c == '#' && start.is_none() {
            break;
        }
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: &line[s..i],
                    column: line[..s].chars().count() + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            column: line[..s].chars().count() + 1,
        });
    }
    out
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> GraphError {
    GraphError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_spec(tok: &Token<'_>, line: usize) -> Result<TensorSpec, GraphError> {
    let err = || syntax(line, tok.column, format!("malformed tensor spec `{}`", tok.text));
    let open = tok.text.find('[').ok_or_else(err)?;
    if !tok.text.ends_with(']') {
        return Err(err());
    }
    let dtype = DType::from_name(&tok.text[..open])
        .ok_or_else(|| syntax(line, tok.column, format!("unknown dtype `{}`", &tok.text[..open])))?;
    let body = &tok.text[open + 1..tok.text.len() - 1];
    let mut shape = Vec::new();
    for part in body.split(',') {
        let d: usize = part.trim().parse().map_err(|_| err())?;
        if d == 0 {
            return Err(syntax(line, tok.column, "tensor extents must be >= 1"));
        }
        shape.push(d);
    }
    if shape.is_empty() {
        return Err(err());
    }
    Ok(TensorSpec::new(dtype, shape))
}

fn parse_params(
    toks: &[Token<'_>],
    schema: &[ParamField],
    line: usize,
    owner: &str,
    kind: &str,
) -> Result<Params, GraphError> {
    let mut params = Params::new();
    for tok in toks {
        let (key, value) = tok
            .text
            .split_once('=')
            .ok_or_else(|| syntax(line, tok.column, format!("expected key=value, got `{}`", tok.text)))?;
        let field = schema.iter().find(|f| f.name == key).ok_or_else(|| {
            syntax(line, tok.column, format!("unknown parameter `{key}` for {kind}"))
        })?;
        if params.contains_key(key) {
            return Err(syntax(line, tok.column, format!("duplicate parameter `{key}`")));
        }
        let v = match field.ty {
            ParamType::Int => ParamValue::Int(value.parse().map_err(|_| {
                syntax(line, tok.column, format!("parameter `{key}` expects an integer, got `{value}`"))
            })?),
            ParamType::Float => {
                let f: f64 = value.parse().map_err(|_| {
                    syntax(line, tok.column, format!("parameter `{key}` expects a number, got `{value}`"))
                })?;
                if !f.is_finite() {
                    return Err(syntax(line, tok.column, format!("parameter `{key}` must be finite")));
                }
                ParamValue::Float(f)
            }
        };
        params.insert(key.to_string(), v);
    }
    // Fill defaults; `SameAs` defaults resolve after explicit values are known.
    for f in schema {
        if params.contains_key(f.name) {
            continue;
        }
        let v = match f.default {
            None => {
                return Err(GraphError::MissingParam {
                    line,
                    node: owner.to_string(),
                    kind: kind.to_string(),
                    param: f.name.to_string(),
                })
            }
            Some(DefaultValue::Int(v)) => ParamValue::Int(v),
            Some(DefaultValue::Float(v)) => ParamValue::Float(v),
            Some(DefaultValue::SameAs(other)) => match params.get(other) {
                Some(v) => *v,
                None => continue,
            },
        };
        params.insert(f.name.to_string(), v);
    }
    Ok(params)
}

/// Parse a DSL document into a validated [`Model`].
pub fn parse_model_dsl(text: &str) -> Result<Model, GraphError> {
    let mut input: Option<TensorSpec> = None;
    let mut nodes: BTreeMap<String, LayerNode> = BTreeMap::new();
    let mut decl_order: Vec<String> = Vec::new();
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut edge_lines: Vec<(usize, usize, usize)> = Vec::new();
    let mut loss: Option<LossSpec> = None;
    let mut optimizer: Option<OptimizerSpec> = None;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let toks = tokenize(raw);
        let Some(head) = toks.first() else { continue };
        match head.text {
            "input" => {
                if input.is_some() {
                    return Err(syntax(line, head.column, "duplicate input statement"));
                }
                if toks.len() != 2 {
                    return Err(syntax(line, head.column, "expected `input <dtype>[d0,...]`"));
                }
                input = Some(parse_spec(&toks[1], line)?);
            }
            "layer" => {
                if toks.len() < 3 {
                    return Err(syntax(line, head.column, "expected `layer <id> <Kind> key=value ...`"));
                }
                let id = toks[1].text;
                if !is_ident(id) {
                    return Err(syntax(line, toks[1].column, format!("invalid identifier `{id}`")));
                }
                if nodes.contains_key(id) {
                    return Err(syntax(line, toks[1].column, format!("duplicate node id `{id}`")));
                }
                let kind = LayerKind::from_name(toks[2].text).ok_or_else(|| GraphError::UnknownKind {
                    line,
                    column: toks[2].column,
                    name: toks[2].text.to_string(),
                })?;
                let params = parse_params(&toks[3..], kind.param_schema(), line, id, kind.name())?;
                nodes.insert(id.to_string(), LayerNode::new(id, kind, params));
                decl_order.push(id.to_string());
            }
            "edge" => {
                if toks.len() != 3 {
                    return Err(syntax(line, head.column, "expected `edge <id> <id>`"));
                }
                edges.push((toks[1].text.to_string(), toks[2].text.to_string()));
                edge_lines.push((line, toks[1].column, toks[2].column));
            }
            "loss" => {
                if toks.len() < 2 {
                    return Err(syntax(line, head.column, "expected `loss <Kind> key=value ...`"));
                }
                let kind = LossKind::from_name(toks[1].text).ok_or_else(|| {
                    syntax(line, toks[1].column, format!("unknown loss `{}`", toks[1].text))
                })?;
                let params = parse_params(&toks[2..], kind.param_schema(), line, "loss", kind.name())?;
                loss = Some(LossSpec { kind, params });
            }
            "optimizer" => {
                if toks.len() < 2 {
                    return Err(syntax(line, head.column, "expected `optimizer <Kind> key=value ...`"));
                }
                let kind = OptimizerKind::from_name(toks[1].text).ok_or_else(|| {
                    syntax(line, toks[1].column, format!("unknown optimizer `{}`", toks[1].text))
                })?;
                let params =
                    parse_params(&toks[2..], kind.param_schema(), line, "optimizer", kind.name())?;
                optimizer = Some(OptimizerSpec { kind, params });
            }
            other => {
                return Err(syntax(line, head.column, format!("unknown statement `{other}`")));
            }
        }
    }

    let input_spec = input.ok_or_else(|| syntax(last_line + 1, 1, "missing `input` statement"))?;
    if nodes.is_empty() {
        return Err(syntax(last_line + 1, 1, "model declares no layers"));
    }
    for ((s, t), (line, cs, ct)) in edges.iter().zip(&edge_lines) {
        if !nodes.contains_key(s) {
            return Err(syntax(*line, *cs, format!("edge references undeclared node `{s}`")));
        }
        if !nodes.contains_key(t) {
            return Err(syntax(*line, *ct, format!("edge references undeclared node `{t}`")));
        }
    }
    if edges.is_empty() {
        edges = decl_order.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    }

    let mut model = Model {
        nodes,
        edges,
        input_spec,
        loss: loss.unwrap_or_else(|| LossSpec::new(LossKind::CrossEntropy)),
        optimizer: optimizer.unwrap_or_else(|| OptimizerSpec::new(OptimizerKind::Sgd)),
        metadata: Default::default(),
        lineage: Lineage::default(),
    };
    if model.topo_order().is_none() {
        return Err(GraphError::Cycle {
            nodes: cycle_members(&model),
        });
    }
    model.refresh_metadata();
    model.lineage.seed_depth = model.metadata.depth;
    let diags = validate_graph(&model);
    if !diags.is_empty() {
        return Err(GraphError::Invalid(diags));
    }
    Ok(model)
}

/// Nodes left over after peeling every node with in-degree zero.
fn cycle_members(model: &Model) -> Vec<String> {
    let mut remaining: Vec<String> = model.nodes.keys().cloned().collect();
    loop {
        let before = remaining.len();
        let keep: Vec<String> = remaining
            .iter()
            .filter(|id| {
                model
                    .edges
                    .iter()
                    .any(|(s, t)| t == *id && remaining.contains(s))
            })
            .cloned()
            .collect();
        remaining = keep;
        if remaining.len() == before {
            return remaining;
        }
    }
}

fn write_params(out: &mut String, params: &Params) {
    for (k, v) in params {
        let _ = write!(out, " {k}={v}");
    }
}

/// Serialize a model; byte-deterministic (topological node order, stable edges).
pub fn serialize_model(model: &Model) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "input {}", model.input_spec);
    let order = model
        .topo_order()
        .unwrap_or_else(|| model.nodes.keys().cloned().collect());
    for id in &order {
        let n = &model.nodes[id];
        let _ = write!(out, "layer {} {}", n.id, n.kind);
        write_params(&mut out, &n.params);
        out.push('\n');
    }
    for (s, t) in &model.edges {
        let _ = writeln!(out, "edge {s} {t}");
    }
    let _ = write!(out, "loss {}", model.loss.kind.name());
    write_params(&mut out, &model.loss.params);
    out.push('\n');
    let _ = write!(out, "optimizer {}", model.optimizer.kind.name());
    write_params(&mut out, &model.optimizer.params);
    out.push('\n');
    out
}

//! Legal value sets for parameter, loss and optimizer mutations.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::Rng;
use serde::Deserialize;

use crate::graph::{LayerKind, LossKind, Task};

const BUILTIN: &str = include_str!("../../data/mutation_params.toml");

/// Domain of one mutable parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Values(Vec<i64>),
    Range { lo: f64, hi: f64, log: bool },
    /// Channel/unit scaling range anchored at the pre-mutation extent.
    Extent,
}

impl Domain {
    /// Whether `v` lies in the domain (extent domains need an anchor, see [`extent_range`]).
    pub fn contains(&self, v: f64) -> bool {
        match self {
            Domain::Values(vs) => vs.iter().any(|x| *x as f64 == v),
            Domain::Range { lo, hi, .. } => v >= *lo && v <= *hi,
            Domain::Extent => v >= 1.0,
        }
    }

    /// A continuous draw, rounded to four significant digits and kept in range.
    pub fn draw_float(&self, rng: &mut impl Rng) -> f64 {
        let Domain::Range { lo, hi, log } = *self else {
            panic!("draw_float on a discrete domain");
        };
        let v = if log && lo > 0.0 {
            (rng.gen_range(lo.ln()..=hi.ln())).exp()
        } else {
            rng.gen_range(lo..=hi)
        };
        let rounded: f64 = format!("{v:.3e}").parse().unwrap_or(v);
        rounded.clamp(lo, hi)
    }
}

/// Inclusive extent range `[ceil(anchor/4), 4*anchor]`.
pub fn extent_range(anchor: usize) -> (usize, usize) {
    let anchor = anchor.max(1);
    (anchor.div_ceil(4).max(1), 4 * anchor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParam {
    pub kind: LayerKind,
    pub param: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptParam {
    /// Restricts a loss entry to one kind; optimizer entries apply to any kind with the param.
    pub kind: Option<LossKind>,
    pub param: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutationTable {
    pub version: u32,
    pub layers: Vec<LayerParam>,
    pub tasks: BTreeMap<Task, Vec<LossKind>>,
    pub losses: Vec<ScriptParam>,
    pub optimizers: Vec<ScriptParam>,
}

#[derive(Deserialize)]
struct RawEntry {
    kind: Option<String>,
    param: String,
    values: Option<Vec<i64>>,
    range: Option<[f64; 2]>,
    #[serde(default)]
    log: bool,
    #[serde(default)]
    extent: bool,
}

#[derive(Deserialize)]
struct RawTable {
    version: u32,
    layer: Vec<RawEntry>,
    tasks: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    loss: Vec<RawEntry>,
    #[serde(default)]
    optimizer: Vec<RawEntry>,
}

impl RawEntry {
    fn domain(&self) -> Result<Domain, String> {
        match (&self.values, self.range, self.extent) {
            (Some(v), None, false) if !v.is_empty() => Ok(Domain::Values(v.clone())),
            (None, Some([lo, hi]), false) if lo <= hi && lo.is_finite() && hi.is_finite() => Ok(Domain::Range {
                lo,
                hi,
                log: self.log,
            }),
            (None, None, true) => Ok(Domain::Extent),
            _ => Err(format!("`{}` needs exactly one of values, range or extent", self.param)),
        }
    }
}

impl MutationTable {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let raw: RawTable = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut layers = Vec::new();
        for e in &raw.layer {
            let name = e.kind.as_deref().ok_or_else(|| format!("layer entry `{}` has no kind", e.param))?;
            let kind = LayerKind::from_name(name).ok_or_else(|| format!("unknown layer kind `{name}`"))?;
            if !kind.param_schema().iter().any(|f| f.name == e.param) {
                return Err(format!("{kind} has no parameter `{}`", e.param));
            }
            layers.push(LayerParam {
                kind,
                param: e.param.clone(),
                domain: e.domain()?,
            });
        }
        let mut tasks = BTreeMap::new();
        for (task, kinds) in &raw.tasks {
            let task = match task.as_str() {
                "classification" => Task::Classification,
                "regression" => Task::Regression,
                other => return Err(format!("unknown task `{other}`")),
            };
            let kinds = kinds
                .iter()
                .map(|k| LossKind::from_name(k).ok_or_else(|| format!("unknown loss `{k}`")))
                .collect::<Result<Vec<_>, _>>()?;
            if kinds.iter().any(|k| k.task() != task) {
                return Err(format!("{task:?} lists a loss of another task"));
            }
            tasks.insert(task, kinds);
        }
        let losses = raw
            .loss
            .iter()
            .map(|e| {
                let kind = match &e.kind {
                    Some(k) => Some(LossKind::from_name(k).ok_or_else(|| format!("unknown loss `{k}`"))?),
                    None => None,
                };
                Ok(ScriptParam {
                    kind,
                    param: e.param.clone(),
                    domain: e.domain()?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let optimizers = raw
            .optimizer
            .iter()
            .map(|e| {
                Ok(ScriptParam {
                    kind: None,
                    param: e.param.clone(),
                    domain: e.domain()?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(Self {
            version: raw.version,
            layers,
            tasks,
            losses,
            optimizers,
        })
    }

    pub fn builtin() -> &'static MutationTable {
        static TABLE: OnceLock<MutationTable> = OnceLock::new();
        TABLE.get_or_init(|| MutationTable::from_toml(BUILTIN).expect("bundled mutation table is valid"))
    }

    pub fn layer_params(&self, kind: LayerKind) -> impl Iterator<Item = &LayerParam> {
        self.layers.iter().filter(move |p| p.kind == kind)
    }

    pub fn layer_domain(&self, kind: LayerKind, param: &str) -> Option<&Domain> {
        self.layers
            .iter()
            .find(|p| p.kind == kind && p.param == param)
            .map(|p| &p.domain)
    }

    pub fn losses_for(&self, task: Task) -> &[LossKind] {
        self.tasks.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn loss_domain(&self, kind: LossKind, param: &str) -> Option<&Domain> {
        self.losses
            .iter()
            .find(|p| p.param == param && p.kind.is_none_or(|k| k == kind))
            .map(|p| &p.domain)
    }

    pub fn optimizer_domain(&self, param: &str) -> Option<&Domain> {
        self.optimizers.iter().find(|p| p.param == param).map(|p| &p.domain)
    }
}

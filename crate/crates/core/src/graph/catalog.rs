//! Functionality-classified structure templates.
//!
//! The catalog ships as `data/catalog.toml`. Templates are DSL bodies with
//! placeholders bound per slot; a template fits a slot when its instantiation
//! infers exactly the slot's output spec.

use std::sync::OnceLock;

use serde::Deserialize;
use thiserror::Error;

use super::{infer_shapes, parse_model_dsl, FunctionalityClass, GraphError, Model, TensorSpec};

const BUILTIN: &str = include_str!("../../data/catalog.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Backbone,
    Cascade,
    Basic,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Template {
    pub name: String,
    pub tier: Tier,
    pub class: FunctionalityClass,
    #[serde(default = "one")]
    pub arity: usize,
    pub reference_input: String,
    pub reference_out: usize,
    pub reference_output: String,
    pub body: String,
}

fn one() -> usize {
    1
}

/// Placeholder bindings for one instantiation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotContext {
    pub input: TensorSpec,
    pub out: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Input/output contract of a region to be filled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    pub input: TensorSpec,
    pub output: TensorSpec,
    /// Number of incoming tensors at the slot entry.
    pub arity: usize,
    /// Window of the pooling node being replaced, if any.
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
}

impl SlotSpec {
    pub fn new(input: TensorSpec, output: TensorSpec) -> Self {
        Self {
            input,
            output,
            arity: 1,
            kernel: None,
            stride: None,
        }
    }

    pub fn context(&self) -> SlotContext {
        SlotContext {
            input: self.input.clone(),
            out: self.output.channels(),
            kernel: self.kernel.unwrap_or(2),
            stride: self.stride.unwrap_or(2),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template `{template}` has an unbound placeholder in `{text}`")]
    Placeholder { template: String, text: String },
    #[error("template `{template}` does not instantiate: {source}")]
    Graph {
        template: String,
        #[source]
        source: GraphError,
    },
    #[error("template `{template}` produces {got}, contract requires {expected}")]
    Contract {
        template: String,
        expected: String,
        got: String,
    },
    #[error("catalog file: {0}")]
    File(String),
}

impl Template {
    fn bind(&self, ctx: &SlotContext) -> Result<String, TemplateError> {
        let half = (ctx.out / 2).max(1);
        let quarter = (ctx.out / 4).max(1);
        let text = self
            .body
            .replace("@quarter", &quarter.to_string())
            .replace("@half", &half.to_string())
            .replace("@kernel", &ctx.kernel.to_string())
            .replace("@stride", &ctx.stride.to_string())
            .replace("@out", &ctx.out.to_string())
            .replace("@in", &ctx.input.channels().to_string());
        if text.contains('@') {
            return Err(TemplateError::Placeholder {
                template: self.name.clone(),
                text,
            });
        }
        Ok(text)
    }

    /// Instantiate as a standalone model reading `ctx.input`.
    pub fn instantiate(&self, ctx: &SlotContext) -> Result<Model, TemplateError> {
        let body = self.bind(ctx)?;
        let text = format!("input {}\n{}", ctx.input, body);
        parse_model_dsl(&text).map_err(|source| TemplateError::Graph {
            template: self.name.clone(),
            source,
        })
    }

    /// Output spec of the instantiation, if it builds.
    pub fn output_for(&self, ctx: &SlotContext) -> Option<TensorSpec> {
        let m = self.instantiate(ctx).ok()?;
        let sink = m.sink()?.to_string();
        infer_shapes(&m).ok()?.remove(&sink)
    }

    /// Check the declared reference contract.
    pub fn check_contract(&self) -> Result<(), TemplateError> {
        let file_err = |msg: String| TemplateError::File(format!("{}: {msg}", self.name));
        let input: TensorSpec = self.reference_input.parse().map_err(file_err)?;
        let expected: TensorSpec = self.reference_output.parse().map_err(file_err)?;
        let ctx = SlotContext {
            input,
            out: self.reference_out,
            kernel: 2,
            stride: 2,
        };
        let m = self.instantiate(&ctx)?;
        let sink = m.sink().map(str::to_string).unwrap_or_default();
        let got = infer_shapes(&m).ok().and_then(|mut s| s.remove(&sink));
        match got {
            Some(g) if g == expected => Ok(()),
            other => Err(TemplateError::Contract {
                template: self.name.clone(),
                expected: expected.to_string(),
                got: other.map(|g| g.to_string()).unwrap_or_else(|| "nothing".into()),
            }),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct StructureCatalog {
    pub version: u32,
    #[serde(rename = "template")]
    pub templates: Vec<Template>,
}

impl StructureCatalog {
    pub fn from_toml(text: &str) -> Result<Self, TemplateError> {
        let cat: StructureCatalog = toml::from_str(text).map_err(|e| TemplateError::File(e.to_string()))?;
        for t in &cat.templates {
            t.check_contract()?;
        }
        Ok(cat)
    }

    /// The bundled catalog.
    pub fn builtin() -> &'static StructureCatalog {
        static CAT: OnceLock<StructureCatalog> = OnceLock::new();
        CAT.get_or_init(|| StructureCatalog::from_toml(BUILTIN).expect("bundled catalog is valid"))
    }

    pub fn tier(&self, tier: Tier) -> impl Iterator<Item = &Template> {
        self.templates.iter().filter(move |t| t.tier == tier)
    }

    pub fn get(&self, name: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.name == name)
    }
}

/// Bundled templates of `class` whose instantiation satisfies `slot`.
pub fn catalog_candidates(class: FunctionalityClass, slot: &SlotSpec) -> Vec<&'static Template> {
    let ctx = slot.context();
    StructureCatalog::builtin()
        .templates
        .iter()
        .filter(|t| t.class == class && t.arity == slot.arity)
        .filter(|t| t.output_for(&ctx).as_ref() == Some(&slot.output))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{validate_graph, DType};

    fn spec(s: &str) -> TensorSpec {
        s.parse().unwrap()
    }

    #[test]
    fn tier_counts() {
        let cat = StructureCatalog::builtin();
        assert_eq!(cat.tier(Tier::Backbone).count(), 5);
        assert_eq!(cat.tier(Tier::Cascade).count(), 7);
        assert_eq!(cat.tier(Tier::Basic).count(), 5);
        assert_eq!(cat.version, 1);
    }

    #[test]
    fn every_template_validates_alone() {
        for t in &StructureCatalog::builtin().templates {
            let ctx = SlotContext {
                input: spec(&t.reference_input),
                out: t.reference_out,
                kernel: 2,
                stride: 2,
            };
            let m = t.instantiate(&ctx).unwrap();
            assert!(validate_graph(&m).is_empty(), "{}", t.name);
        }
    }

    #[test]
    fn pooling_candidates_are_pools() {
        let slot = SlotSpec::new(spec("f32[2,4,8,8]"), spec("f32[2,4,4,4]"));
        let names: Vec<_> = catalog_candidates(FunctionalityClass::Pooling, &slot)
            .iter()
            .map(|t| t.name.as_str())
            .collect();
        assert_eq!(names, vec!["max_pool", "avg_pool"]);
    }

    #[test]
    fn merging_single_input_slot_is_empty() {
        let slot = SlotSpec::new(spec("f32[2,4,8,8]"), spec("f32[2,4,8,8]"));
        assert!(catalog_candidates(FunctionalityClass::Merging, &slot).is_empty());
    }

    #[test]
    fn four_to_four_includes_conv_bn_relu() {
        let slot = SlotSpec::new(spec("f32[2,4,8,8]"), spec("f32[2,4,8,8]"));
        let c = catalog_candidates(FunctionalityClass::FeatureExtraction, &slot);
        assert!(c.iter().any(|t| t.name == "conv_bn_relu"));
        assert!(c.iter().all(|t| t.class == FunctionalityClass::FeatureExtraction));
        // Downsampling structures change the spatial extent and cannot fit.
        assert!(!c.iter().any(|t| t.name == "downsample_block"));
    }

    #[test]
    fn dense_slot_gets_dense_templates() {
        let slot = SlotSpec::new(spec("f32[2,4,3,3]"), TensorSpec::new(DType::F32, vec![2, 10]));
        let names: Vec<_> = catalog_candidates(FunctionalityClass::FeatureExtraction, &slot)
            .iter()
            .map(|t| t.name.clone())
            .collect();
        assert!(names.contains(&"dense_relu".to_string()));
        assert!(names.contains(&"mlp_stage".to_string()));
    }

    #[test]
    fn contract_violation_detected() {
        let bad = "version = 1\n[[template]]\nname = \"x\"\ntier = \"basic\"\nclass = \"activation\"\nreference_input = \"f32[1,2]\"\nreference_out = 2\nreference_output = \"f32[1,3]\"\nbody = \"layer r ReLU\"\n";
        assert!(matches!(StructureCatalog::from_toml(bad), Err(TemplateError::Contract { .. })));
    }
}

//! Seed models bundled with the crate, addressable as `builtin:<name>`.

use crate::graph::{parse_model_dsl, GraphError, Lineage, Model};

pub const BUILTIN_SEEDS: &[(&str, &str)] = &[
    ("lenet_small", include_str!("../data/seeds/lenet_small.gm")),
    ("vgg_small", include_str!("../data/seeds/vgg_small.gm")),
    ("resnet_mini", include_str!("../data/seeds/resnet_mini.gm")),
    ("inception_mini", include_str!("../data/seeds/inception_mini.gm")),
    ("mlp_regression", include_str!("../data/seeds/mlp_regression.gm")),
];

pub fn builtin_text(name: &str) -> Option<&'static str> {
    BUILTIN_SEEDS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Parse a seed document and root its lineage at `seed_id`.
pub fn load_seed(seed_id: &str, text: &str) -> Result<Model, GraphError> {
    let mut m = parse_model_dsl(text)?;
    m.lineage = Lineage::root(seed_id, m.metadata.depth);
    Ok(m)
}

pub fn builtin(name: &str) -> Option<Model> {
    builtin_text(name).and_then(|t| load_seed(name, t).ok())
}

pub fn all_builtin() -> Vec<Model> {
    BUILTIN_SEEDS
        .iter()
        .map(|(n, t)| load_seed(n, t).expect("bundled seed parses"))
        .collect()
}

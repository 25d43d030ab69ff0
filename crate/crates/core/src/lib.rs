//! Differential mutation fuzzing of computation-graph executors.

pub mod campaign;
pub mod coverage;
pub mod exec;
pub mod graph;
pub mod jsonfloat;
pub mod legality;
pub mod mutate;
pub mod oracles;
pub mod rng;
pub mod scheduler;
pub mod seeds;

pub mod bfn;
pub mod data;
pub mod checkpoint;
pub mod finetune;
pub mod graph;
pub mod network;
pub mod mat;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod train;
pub mod tokenizer;
pub mod vocab;

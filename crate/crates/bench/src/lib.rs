//! Criterion benchmark harness for the engine; see `benches/engine.rs`.

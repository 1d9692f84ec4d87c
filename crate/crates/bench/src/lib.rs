//! Criterion benchmarks for the characterization and analysis pipelines;
//! see `benches/pipeline.rs`.

//! Criterion benchmarks for the dual objective; see `benches/`.

//! Criterion benchmarks for the rctm crate; see `benches/`.

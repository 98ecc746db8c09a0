//! Criterion benchmarks for the guidance estimators live in `benches/`.

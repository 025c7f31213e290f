//! Criterion benchmarks for the ensemble bridge pipeline live in `benches/`.

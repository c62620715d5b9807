//! Criterion benchmarks for labeldp live under `benches/`.

//! Criterion benchmarks for the simulation and classifier hot paths live in `benches/`.

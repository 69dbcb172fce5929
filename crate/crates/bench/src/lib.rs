//! Criterion benchmarks for the petseg kernels live in `benches/`.

//! Criterion benchmarks of the drift kernels live in `benches/`.

//! Criterion benchmarks for the numeric kernels and training step; see
//! `benches/kernels.rs`. Run with `cargo bench -p cmim-bench`.

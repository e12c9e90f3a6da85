//! Criterion benchmarks for the decoder's kernels; see `benches/kernels.rs`.
//!
//! Run with `cargo bench -p lckv-bench`.

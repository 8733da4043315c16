//! Criterion benchmarks for the range coder, the context fusers and whole-model
//! coding. Run with `cargo bench -p cnc-bench`.

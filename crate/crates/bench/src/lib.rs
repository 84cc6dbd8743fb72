//! Benchmark-only crate; see `benches/kernels.rs`. Kept as a separate
//! package so criterion and its dependency tree stay out of the library
//! and CLI builds.

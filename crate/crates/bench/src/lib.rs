//! Benchmarks for the toll network core; see `benches/protocol.rs`.

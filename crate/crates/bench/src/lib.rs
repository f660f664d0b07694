//! Benchmarks for the mixbell solver live in `benches/`.

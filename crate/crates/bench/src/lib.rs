//! Criterion benchmarks for the dysflux head; see `benches/`.

//! Criterion benchmarks for the memspm engine; see `benches/`.

//! Criterion benchmarks for the spectrum-correction pipeline; see `benches/`.

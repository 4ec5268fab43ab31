//! Criterion benchmarks for the DRS learner live in `benches/`.

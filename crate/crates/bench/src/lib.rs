//! Benchmarks for `rsvl-core`. Run them with `cargo bench -p rsvl-bench`;
//! the code lives under `benches/`.

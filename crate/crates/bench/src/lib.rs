// Benchmarks live in benches/; see salora-core for the library.

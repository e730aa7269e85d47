//! Benchmark-only crate; the suites live in `benches/solver.rs` and cover
//! the Hamiltonian sweep, one implicit two-goal step, the deadline
//! coupling, the last-period solve, and a full coarse-grid solve.

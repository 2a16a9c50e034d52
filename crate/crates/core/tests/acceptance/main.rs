//! Acceptance suite. Each test prints one `[acceptance N] PASS|FAIL` line.

mod ablation;
mod coverage;
mod decomposition;
mod determinism;
mod gradients;
mod invariants;
mod oracles;
mod overfit;
mod scan;
mod shock;
mod support;

//! Multichallenger proof-of-backhaul.
//!
//! A prover claims a backhaul bandwidth. Challengers jointly flood the link
//! with signed probes, the prover commits to what it received with a Merkle
//! root, and a verifier turns the challengers' round-trip reports into a
//! bandwidth estimate that Byzantine challengers cannot inflate.

pub mod crypto;
pub mod num;
pub mod roles;
pub mod schedule;
pub mod wire;
pub mod adversary;
pub mod netsim;
pub mod abw;

/// Verifier output in floating point.
pub type PoBOutputF64 = roles::PoBOutput<f64>;
/// Verifier output in exact rational arithmetic.
pub type ExactPoBOutput = roles::PoBOutput<num_rational::Ratio<i128>>;
pub type Verifier = roles::VerifierState<f64>;
pub type ExactVerifier = roles::VerifierState<num_rational::Ratio<i128>>;

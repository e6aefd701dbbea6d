//! Oracles and generators shared by the lipnet test suites.
//!
//! Everything here is deliberately slow and simple: brute-force searches,
//! textbook eigenvalue iteration, central finite differences. Tests compare
//! the fast implementations in `lipnet` against these.

pub mod fd;
pub mod gradcheck;
pub mod netgen;
pub mod oracle;

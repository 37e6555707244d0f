//! Probabilistic solver for systems of nonlocal integro-PDEs.
//!
//! Viscosity solutions of
//!
//! ```text
//! -∂t u - b·Du - ½Tr(σσᵀD²u) - K u - h(t, x, u, σᵀDu, B u) = 0,   u(T, ·) = g
//! ```
//!
//! (optionally with a lower obstacle `u ≥ ℓ`) are computed by simulating the
//! forward jump-diffusion and solving the associated backward SDE with jumps by
//! regression Monte Carlo. The nonlocal argument `B u` is frozen and iterated to
//! a fixed point, which makes the solver indifferent to the sign of the jump
//! weights and to the monotonicity of `h` in its last argument.
//!
//! A deterministic 1-D finite-difference solver ([`oracle`]) provides ground
//! truth for the Monte-Carlo results.

pub mod bsde;
pub mod error;
pub mod forward;
pub mod harness;
pub mod measure;
pub mod nonlocal;
pub mod oracle;
pub mod par;
pub mod picard;
pub mod problem;
pub mod reflected;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

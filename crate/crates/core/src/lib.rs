//! Synthesis of randomized control policies that minimize the KL divergence
//! between a closed-loop trajectory density and a reference density, subject
//! to moment constraints on the control.
//!
//! All densities are tabulated on uniform grids (1-D state, 1-D control) and
//! integrated with the trapezoid rule. The crate is `no_std` and only needs
//! `alloc`; file formats and the command line live in the `fpd` crate.
//!
//! Layout:
//!
//! - [`density`]: grids, densities, kernels, quadrature, KL, sampling.
//! - [`constraints`]: moment-constraint features and the independence test.
//! - [`multipliers`]: Newton solver for the convex dual of the moment problem.
//! - [`tilting`]: closed-form constrained minimizer of `KL(f||g) + E_f[alpha]`.
//! - [`synthesis`]: backward recursion producing the optimal policy.
//! - [`datakit`]: trajectory sets, reference selection, factor estimation.
//! - [`evaluation`]: objective decomposition, audits, seeded rollouts.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod constraints;
pub mod datakit;
pub mod density;
pub mod error;
pub mod evaluation;
pub mod multipliers;
pub mod synthesis;
pub mod tilting;

pub use error::{Error, Result};

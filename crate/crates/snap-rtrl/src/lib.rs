//! Online training of recurrent networks with sparse approximations to
//! real-time recurrent learning (RTRL), exact oracles (BPTT, full RTRL),
//! stochastic and local baselines (UORO, RFLO), cost models, and bias
//! diagnostics.
//!
//! The influence matrix J_t = ∂state_t/∂θ obeys J_t = I_t + D_t J_{t−1}.
//! The n-step family keeps only entries of J whose (row, column) lies in the
//! structural n-step reachability pattern; n = 1 tracks one entry per
//! parameter, larger n is less biased and more expensive, and the fixpoint
//! pattern recovers exact (sparse) RTRL.

pub mod cells;
pub mod costmodel;
pub mod diagnostics;
pub mod engines;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod optim;
pub mod pattern;
pub mod readout;
pub mod tasks;

pub use error::{Error, Result};

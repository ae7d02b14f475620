//! Distribution system state estimation for three-phase radial feeders.
//!
//! Two estimators share one data pipeline: a rectangular-voltage weighted
//! least squares estimator solved by Gauss-Newton ([`wls`]), and feed-forward
//! networks whose weight sparsity follows the feeder topology ([`nn`]), with
//! layers pruned once the PMU-bounded partition a bus belongs to is resolved
//! ([`topology`]). Training data comes from Monte Carlo load draws pushed
//! through a backward/forward sweep power flow ([`powerflow`]) and a
//! measurement synthesizer ([`measurements`]).

pub mod grid;
pub mod measurements;
pub mod nn;
pub mod pipeline;
pub mod powerflow;
pub mod state;
pub mod topology;
pub mod wls;

pub use grid::{FeederModel, GridError, Phase, PhaseSet};
pub use state::{StateLayout, StateVector};

//! EV charging on radial distribution grids.
//!
//! The crate covers utility-maximizing allocation of charging power under the
//! linearized Distflow and relaxed AC branch-flow models, a discrete-event
//! simulator of parking and charging, a fluid-model integrator and the
//! computation of invariant points.
//!
//! The grid, power-flow and allocation code is generic over [`Real`]; the
//! aliases below fix the scalar to `f64`.

pub mod alloc;
pub mod config;
pub mod error;
pub mod fluid;
pub mod grid;
pub mod harness;
pub mod invariant;
pub mod law;
pub mod power_flow;
pub mod quad;
pub mod real;
pub mod sim;

pub use error::{Error, Result};
pub use real::Real;

pub type Grid = grid::GridSpec<f64>;
pub type Table = grid::NodeTypeTable<f64>;
pub type Utility = alloc::UtilitySpec<f64>;
pub type Allocation = alloc::AllocationResult<f64>;
pub type Voltages = power_flow::VoltageSolution<f64>;

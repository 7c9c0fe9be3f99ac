//! Safe software-update rollout scheduling for radial distribution grids.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`bounds::universal_bounds`] computes a squared-voltage lower bound and a
//!    squared-current upper bound that hold for every admissible inverter
//!    injection.
//! 2. [`constraints`] turns those bounds into linear safety constraints
//!    `H 1_I <= b` on the set `I` of buses updated in one time slot.
//! 3. [`constraints::assemble_instance`] stacks the blocks into a vector bin
//!    packing instance.
//! 4. [`packing::best_fit_decreasing`] packs updates into fault-clearing-time
//!    slots.
//! 5. [`verify::worst_case_margins`] falsification-tests each slot against the
//!    nonlinear DistFlow power flow in [`distflow`].
//!
//! [`pipeline`] ties the stages together and writes the run artifacts.

pub mod bounds;
pub mod constraints;
pub mod distflow;
pub mod network;
pub mod packing;
mod par;
pub mod pipeline;
pub mod sparse;
pub mod verify;

pub use bounds::{universal_bounds, BoundsResult};
pub use constraints::{assemble_instance, ConstraintSystem, Variant};
pub use distflow::{solve_distflow, PowerFlowSolution};
pub use network::{derive_topology, parse_case, DerivedTopology, NetworkModel};
pub use packing::{best_fit_decreasing, Schedule};
pub use verify::{worst_case_margins, MarginReport};

//! Distributed model predictive control for coupled linear systems.
//!
//! Each agent owns a local QP; the coupled problem is solved by a distributed
//! primal active-set method whose steps are found with a decentralized conjugate
//! gradient on the dual of the coupling constraints. A consensus ADMM is provided
//! as a comparison method, and the [`oracle`] module contains dense centralized
//! references.

// NaN-rejecting `!(x > 0.0)` checks are intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod asm;
pub mod condense;
pub mod dcg;
pub mod error;
pub mod fabric;
pub mod model;
pub mod oracle;
pub mod qp;

pub use admm::{Admm, AdmmConfig, AdmmPreset, AdmmSolution};
pub use asm::{asm_solve, ActiveSet, AsmConfig, AsmSolution, AsmStats};
pub use error::{Error, FabricError, Result};
pub use fabric::{CommCounts, CommLedger, Phase, SimFabric, Transport};
pub use model::{
    build_chain_of_masses, plant_step, AgentModel, ChainParams, NetworkModel, PlantState,
};
pub use qp::{build_agent_qp, build_all, AgentQp, VariableLayout};

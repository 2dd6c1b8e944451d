//! Colony of learner agents: a small CNN core, role-based archetypes with
//! addressable knowledge modules, marriage operators that share weights
//! between parents, a genealogy registry and diversity-quality scoring.

pub mod agent;
pub mod data;
pub mod dq;
pub mod error;
pub mod eval;
pub mod marriage;
pub mod nn;
pub mod registry;
pub mod seed;
pub mod train;
pub mod zoo;

pub use error::{ColonyError, Result};

//! Temporal-advantage decision transformer with contrastive state
//! abstraction, plus the synthetic-MDP lab and evaluation suite around it.

pub mod bound;
pub mod checkpoint;
pub mod csa;
pub mod env;
pub mod eval;
pub mod error;
pub mod experiments;
pub mod fdcheck;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rank;
pub mod rng;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};

//! Session-based next-item recommendation with spatial and temporal session
//! encoders trained under a joint contrastive objective.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod graphs;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod synthetic;
pub mod trainer;

pub use config::{Ablations, LossKind, Scheduler, Strategy, TrainConfig};
pub use error::{RestcError, Result};

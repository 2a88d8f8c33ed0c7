//! Knowledge tracing toolkit: a small reverse-mode autodiff engine, data
//! handling for interaction logs, exercise relations, and four sequence
//! models (DKT, DKVMN, SAKT, RKT) with training and rolling evaluation.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod params;
pub mod relation;
pub mod tensor;
pub mod train;

pub use config::TrainConfig;
pub use error::{KtError, Result};

//! Fund recommendation from disentangled user behavior.
//!
//! The pipeline: a heterogeneous fund graph is encoded into fund embeddings,
//! each user's interaction history is split by attention into interest, risk
//! and conformity aspects, and two sigmoid scoring heads are blended by fund
//! popularity at prediction time. Training adds a contrastive objective that
//! ties the risk aspect to the fund-type composition of the user's history.
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tensor`]); data
//! is synthetic with planted user archetypes ([`data`]) so that ranking
//! quality, ablations and probes can be checked end to end.

pub mod cli;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

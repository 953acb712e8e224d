//! Coordinated account group detection from marked temporal event sequences.
//!
//! A neural temporal point process learns account embeddings from activity
//! cascades; a conditional random field over group assignments ties those
//! embeddings to a prior-knowledge co-activity graph; variational EM with a
//! mean-field posterior trains both jointly.

pub mod autodiff;
pub mod crf_field;
pub mod em_engine;
pub mod error;
pub mod event_data;
pub mod hawkes_synth;
pub mod kmeans;
pub mod knowledge_graph;
pub mod linalg;
pub mod metrics_eval;
pub mod optim;
pub mod pipeline;
pub mod seq_model;

pub use error::{Error, Result};

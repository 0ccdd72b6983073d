//! Demand prediction for station networks that grow over time.
//!
//! Each station's recent demand is encoded by a shared LSTM, conditioned on
//! its static features, propagated over distance, functional-similarity and
//! road-accessibility graphs by a multi-graph GCN, and decoded into expected
//! demand per weekday. Stations without history still get predictions
//! through their features and their neighbours.
//!
//! The numeric core is generic over [`Scalar`]; the `*64` aliases fix it to
//! `f64`, which is what the pipeline uses end to end.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geo;
pub mod graph;
pub mod model;
pub mod scalar;
pub mod spatial;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ParamSet, Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type DemandModel64 = model::DemandModel<f64>;
pub type Checkpoint64 = checkpoint::ModelCheckpoint<f64>;
pub type CategorySimilarity64 = graph::CategorySimilarity<f64>;
pub type NetworkSnapshot64 = graph::NetworkSnapshot<f64>;

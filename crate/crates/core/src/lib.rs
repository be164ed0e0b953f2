//! Video temporal grounding with bidirectional gated state-space aligner
//! blocks, a frozen-block refiner and dual localization/highlight heads.
//!
//! Everything runs on the small tensor library in [`numerics`]; no deep
//! learning framework is involved.

pub mod aligner;
pub mod bench;
pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod frontend;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod refiner;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};

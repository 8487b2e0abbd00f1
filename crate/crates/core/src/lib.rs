//! Open-set graph anomaly detection with normal structure regularisation.
//!
//! A supervised GraphSAGE anomaly detector is trained together with an
//! auxiliary relation-prediction objective over pairs anchored at labelled
//! normal nodes. The auxiliary head only shapes the shared representation
//! during training; inference uses the encoder and scoring head alone.
//!
//! Modules, bottom-up:
//! - [`numeric`]: matrices, reverse-mode tape, Adam, finite-difference checks
//! - [`graph`]: attributed graphs, file formats, neighbour sampling, synthetic benchmark
//! - [`encoder`]: two-layer mean-aggregator GraphSAGE plus projection network
//! - [`nsr`]: relation sampling, labelling, relation embedding and loss
//! - [`detectors`]: scoring heads and the detector composition
//! - [`trainer`]: the joint training loop and checkpoints
//! - [`eval`]: rotations, metrics and reports

pub mod detectors;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nsr;
pub mod numeric;
pub mod trainer;

pub use error::{Error, Result};

/// Serialises `value` as JSON with lexicographically sorted object keys.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Result<String> {
    // serde_json's Map is a BTreeMap unless `preserve_order` is enabled.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

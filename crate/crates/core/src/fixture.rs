//! The toy driving model shipped with the crate.
//!
//! Encoder: an 8-wide ReLU layer over the 22-wide scenario vector, then a
//! ReLU projection into the 100-wide LM embedding. LM: five square 100-wide
//! ReLU layers and a linear 6-output head. Regenerate with the
//! `train_fixture` example.

use crate::error::Result;
use crate::graph::{decode_model, ModelGraph};

pub const FIXTURE_BYTES: &[u8] = include_bytes!("../fixtures/driving.lodt");

pub fn default_graph() -> Result<ModelGraph> {
    decode_model(FIXTURE_BYTES)
}

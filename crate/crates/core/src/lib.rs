//! Social group detection in multi-person video scenes.
//!
//! Given per-person trajectories and per-person appearance feature
//! sequences, the model scores person-pair edges with an occlusion-aware
//! spatio-temporal network, builds an affinity matrix, and clusters it into
//! groups. The crate ships the full loop: a small reverse-mode tensor
//! engine, the model itself, training and inference drivers, clustering,
//! half-metric evaluation, and a synthetic scene generator for end-to-end
//! verification.

pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};

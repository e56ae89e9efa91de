//! Compositional add/remove layer GANs over synthetic layered scenes.
//!
//! The crate covers scene generation, the layer compositor, the generator
//! and discriminator networks, losses, training, inference (classification,
//! depth ordering, multi-layer decomposition) and evaluation metrics.

pub mod checkpoint;
pub mod compositor;
pub mod error;
pub mod eval;
pub mod image;
pub mod infer;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nets;
pub mod scene;
pub mod train;

pub use error::{Error, Result};

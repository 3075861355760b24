//! Cross-view geo-localization between UAV and satellite imagery.
//!
//! A shared encoder maps images of both views to ring-partitioned part
//! embeddings. Training combines a location classifier with a view
//! discriminator whose adversarial signal pushes the encoder towards
//! view-invariant feature maps. Retrieval ranks gallery images by cosine
//! similarity of concatenated part descriptors.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod losses;
pub mod probe;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};

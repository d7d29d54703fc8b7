//! One-shot federated learning through latent distillates.
//!
//! Clients condense their private shard into a small core-set of
//! informative patches, perturb the amplitude spectrum of each patch,
//! encode it with a shared autoencoder and refine the latents so the
//! decoded images reproduce the core-set features under the client's own
//! model. The server decodes the latents and distils the soft labels into
//! a global model in a single round.

pub mod archive;
pub mod coreset;
pub mod distiller;
pub mod error;
pub mod fourier;
pub mod harness;
pub mod model;
pub mod nn;
pub mod partition;
pub mod privacy;
pub mod raster;
pub mod seed;
pub mod server;
pub mod synthetic;

pub use error::{Error, Result};

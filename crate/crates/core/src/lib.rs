//! Epistemic classifier built on a variational autoencoder.
//!
//! A convolutional VAE is trained jointly with a classifier on the latent
//! mean. At inference the classifier's prediction is checked against two
//! kinds of evidence, latent-space nearest neighbours and reconstruction
//! quality, and each input is tagged "I know", "I may know" or "I don't know".

pub mod attacks;
pub mod container;
pub mod data;
pub mod justify;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod neighbors;
pub mod pipeline;
pub mod train;

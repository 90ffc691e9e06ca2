//! Y-Autoencoder training at desk scale.
//!
//! A conditional autoencoder whose latent code is split into a continuous
//! implicit part (style) and a label-aligned explicit part (content). During
//! training the decoder runs as two weight-shared branches — the left
//! conditioned on the true label, the right on a random one — and both
//! reconstructions are re-encoded by the same encoder (sequential encoding).
//! Four losses tie the pieces together; at test time the model is an ordinary
//! conditional autoencoder.
//!
//! The crate is self-contained on CPU: a small reverse-mode autodiff engine
//! ([`nn`]), IDX data handling ([`dataio`]), the model ([`model`]), the loss
//! terms ([`loss`]), the experiment loop ([`trainer`]), and the quantitative
//! disentanglement protocol ([`eval`], [`ssim`]).

pub mod dataio;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod ssim;
pub mod synth;
pub mod trainer;
pub mod util;

pub use scalar::Scalar;

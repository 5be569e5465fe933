//! Height-aware dual-conditioned latent diffusion for aerial-to-ground view
//! synthesis, together with the procedural paired dataset, training stages and
//! evaluation metrics that make the pipeline runnable end to end on desk
//! hardware.

pub mod codec;
pub mod config;
pub mod diffusion;
pub mod metrics;
pub mod nn;
pub mod scene;
pub mod semantic;
pub mod tensor;

pub use config::ExperimentConfig;

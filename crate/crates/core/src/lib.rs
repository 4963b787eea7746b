//! Latent arc strength stochastic blockmodels for directed count networks.

pub mod data;
pub mod em;
pub mod glm;
pub mod inference;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod specfun;

//! Training-free conditional video generation on top of a toy image
//! diffusion model.

pub mod attention;
pub mod error;
pub mod lab;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod sampler;
pub mod schedule;
pub mod video;

pub use error::{Error, Result};

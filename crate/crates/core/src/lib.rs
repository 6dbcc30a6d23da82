//! Diffusion planning for traffic signal control under missing data.

pub mod controller;
pub mod datapipe;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod invdyn;
pub mod model;
pub mod sfm;
pub mod trainer;

pub use error::{Error, Result};

//! Plug-in lesion classification on top of an external segmentation prior.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod gpr;
pub mod hda;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod volume;

pub use error::{PlusError, Result};

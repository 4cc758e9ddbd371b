pub mod container;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod audio;
pub mod motion;
pub mod facialmap;
pub mod metrics;
pub mod dataharness;
pub mod stylemap;
pub mod renderer;
pub mod training;
pub mod transfer;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};

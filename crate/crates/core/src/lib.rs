//! Simulation, preprocessing, indicators and classifiers for rate-induced
//! tipping in noisy prototype systems.

pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod indicators;
pub mod lrp;
pub mod neuralnet;
pub mod preprocess;
pub mod stats;

pub use dynamics::{State, System, SystemConfig, SystemParams};
pub use ensemble::EnsembleStore;
pub use error::{Error, Result};
pub use experiments::{PipelineConfig, Scale};

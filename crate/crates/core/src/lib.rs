//! Unpaired image translation with dual contrastive objectives: networks,
//! losses, training loop, and a small evaluation harness.

pub mod config;
pub mod contrastive;
pub mod error;
pub mod evaluation;
pub mod imagedata;
pub mod networks;
pub mod objectives;
pub mod training;

pub use config::{GanVariant, Mode, TapPoint, TrainConfig};
pub use error::{Error, Result};

//! Layered text-to-image generation with learned foreground switches.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod embedding;
pub mod error;
pub mod experiments;
pub mod generator;
pub mod imageio;
pub mod losses;
pub mod trainer;

pub use config::Hyperparams;
pub use discriminator::Discriminator;
pub use error::{Error, Result};
pub use generator::{Generator, SwitchOverride};

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod losses;
pub mod masking;
pub mod model;
pub mod permute;
pub mod probe;
pub mod queues;
pub mod rng;
pub mod trainer;
pub mod types;

pub use config::{load_config, Config};
pub use error::{Error, Result};
pub use rng::{seeded_rng, RandomStream};

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod desk;
pub mod detector;
pub mod error;
pub mod growth;
pub mod matching;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod plot;
pub mod siamese;
pub mod volume_io;

pub use error::{Error, Result};

pub mod clinical;
pub mod cohort;
pub mod error;
pub mod eval;
pub mod explain;
pub mod models;
pub mod preprocess;
pub mod runner;
pub mod sampling;
pub mod seeds;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::VolumeGrid;

pub type Network32 = models::Network<f32>;
pub type Network64 = models::Network<f64>;
pub type Dataset32 = train::Dataset<f32>;
pub type Dataset64 = train::Dataset<f64>;

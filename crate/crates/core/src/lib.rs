pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod protocol;
pub mod seeding;
pub mod synthdata;

pub use error::{Error, Result};
pub use numerics::Tensor;
pub use params::ParamSet;

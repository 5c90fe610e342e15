pub mod bench;
pub mod boloop;
pub mod data;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod funcprior;
pub mod io;
pub mod model;
pub mod opcount;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use data::Dataset;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};

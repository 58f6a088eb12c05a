pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fem;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod patching;
pub mod trainer;

pub use error::{Error, Result};

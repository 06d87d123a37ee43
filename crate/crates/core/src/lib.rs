pub mod autodiff;
pub mod bilevel;
pub mod checkpoint;
pub mod data;
pub mod distributions;
mod error;
pub mod harness;
pub mod networks;
pub mod noise;
pub mod objectives;
pub mod rng;

pub use error::{Error, Result};

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod floatcodec;
pub mod optimizers;
pub mod statequant;
pub mod trainbench;

pub use error::{Error, Result};

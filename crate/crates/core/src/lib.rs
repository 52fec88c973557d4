pub mod allocator;
pub mod bandwidth;
pub mod budget;
pub mod compressors;
pub mod config;
pub mod ef21;
pub mod error;
pub mod objectives;
pub mod records;
pub mod simulator;
pub(crate) mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};

pub mod attack;
pub mod data;
pub mod error;
pub mod ihvp;
pub mod influence;
pub mod linalg;
pub mod model;
pub mod params;
pub mod saliency;
pub mod second_order;
pub mod tape;
pub mod tensor;
pub mod verify;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

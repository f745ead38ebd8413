mod codec;
pub mod cli;
pub mod error;
pub mod functaset;
pub mod inference;
mod linalg;
pub mod metatrain;
pub mod numerics;
pub mod pose;
pub mod siren;
pub mod synthgen;
mod trig;

pub use error::{Error, Result};

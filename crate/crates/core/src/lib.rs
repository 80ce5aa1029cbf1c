pub mod encoders;
pub mod analysis;
pub mod data;
pub mod error;
pub mod exec;
pub mod harness;
pub mod numerics;
pub mod objective;
pub mod prompting;
pub mod rng;
pub mod scheduler;

pub use error::{ErrorKind, Result, TplError};

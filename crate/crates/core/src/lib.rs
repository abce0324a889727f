pub mod arch;
pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod precision;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};

pub mod agents;
pub mod error;
pub mod evaluation;
pub mod pipeline;
pub mod populations;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vocab;
pub mod worldgen;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Tape, Tensor, Var};

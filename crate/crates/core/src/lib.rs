pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod mksa;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use params::{Bound, ParamStore};
pub use tensor::{Tape, Tensor, Var};

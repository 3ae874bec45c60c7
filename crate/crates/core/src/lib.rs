pub mod bimla;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod io;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

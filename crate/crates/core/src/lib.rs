pub mod analysis;
pub mod backbone;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod io;
pub mod methods;
pub mod stream;
pub mod tape;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tape::{finite_diff_check, Tape, Var};
pub use tensor::Tensor;

//! Vision transformers with token pooling and attention sharing, an analytical
//! cost model, and single-path supernet training with FLOPS-constrained
//! evolutionary search.

pub mod arch;
pub mod error;
pub mod harness;
pub mod layers;
pub mod nas;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

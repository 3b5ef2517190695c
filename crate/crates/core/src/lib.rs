//! Numerical core for temporal detection experiments: NCHW tensors with a
//! small reverse-mode tape, 2-D information entropy maps, recurrent cells
//! (squeezed convolutional GRU and its dense and convolutional baselines)
//! and an analytic parameter/MACs cost model.

pub mod autograd;
pub mod cells;
pub mod conv;
pub mod cost;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod ops;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};

//! Complex-valued convolutional networks on a small planar-complex tensor
//! core, with reverse-mode differentiation, a model zoo, training and
//! evaluation, and dataset I/O.

pub mod autodiff;
pub mod conv;
pub mod data;
pub mod error;
#[doc(hidden)]
pub mod gradcheck;
pub mod io;
pub mod models;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Ctx, Domain, Feat, Mode, ParamId, ParamStore, ParamValue, Tape, Var};
pub use error::{Error, Result};
pub use rng::XorShift64Star;
pub use tensor::{ComplexTensor, DType, RealTensor, Scalar, Shape, Tensor};

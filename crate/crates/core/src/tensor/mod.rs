//! Dense `f64` tensors and a reverse-mode tape.

mod conv;
mod dense;
mod tape;

pub use conv::{Conv2dSpec, Conv3dSpec, PadMode};
pub use dense::Tensor;
pub use tape::{Tape, Var, NORM_EPS};

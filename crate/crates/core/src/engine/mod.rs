//! Minimal tensor engine: dense arrays, im2col convolution, and a tape for
//! reverse-mode differentiation. Generic over `f32` and `f64`.

mod conv;
mod params;
mod tape;
mod tensor;

pub use conv::ConvGeometry;
pub use params::{has_prefix, BindState, ParamStore, Session, SuspendedSession, NORM_MOMENTUM};
pub use tape::{sigmoid, softmax_rows, BatchStats, Gradients, Tape, Var, NORM_EPS};
pub use tensor::{matmul, Float, Tensor};

#[cfg(test)]
mod tests;

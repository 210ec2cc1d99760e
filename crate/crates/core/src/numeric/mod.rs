//! Small dense tensors, a reverse-mode tape, and Adam.
//!
//! Everything is rank-2 (or scalar) and 64-bit. The tape is a static graph:
//! build it once with [`Tape`], run [`forward`] against named inputs, then
//! pull gradients back with [`gradient`] or [`vjp`].

mod adam;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{forward, gradient, vjp, Gradients, InputSource, NodeId, Tape, Values};
pub use tensor::Tensor;
pub(crate) use tape::{gelu_grad_with_tanh, gelu_with_tanh};

//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The design goal is not raw speed but measurability: every recorded op
//! reports how many bytes of activations it retained for its backward rule,
//! so a training step's activation-memory footprint can be read directly off
//! the tape. Two properties make the accounting meaningful:
//!
//! * an op whose inputs all have `requires_grad == false` records nothing,
//!   so frozen subgraphs contribute zero entries and zero bytes;
//! * for the bilinear ops (`matmul`, `mul`) each operand is saved only if the
//!   *other* operand requires grad, since that is the only case its value is
//!   needed in backward.
//!
//! Typical use: build a [`Tape`], run ops from [`ops`], call
//! [`Tape::backward`] on a scalar loss, then read leaf gradients via
//! [`Tensor::grad`] and the memory accounting via [`Tape::report`].
//!
//! Tensors are `Rc`-backed handles and tapes are plain structs; the whole
//! engine is single threaded by construction.

mod error;
pub mod grad_check;
pub mod ops;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use tape::{MemoryReport, NodeId, Tape, TapeEntry};
pub use tensor::Tensor;

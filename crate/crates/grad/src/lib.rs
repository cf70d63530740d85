//! Dense `f64` tensors with an explicit tape for reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly and records enough state to
//! run the chain rule backwards. Gradients are available for every recorded
//! node, leaves included, so callers can differentiate a loss with respect to
//! model inputs as easily as with respect to parameters.
//!
//! ```
//! use scaforge_grad::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
//! ```

mod checkpoint;
mod error;
mod optim;
mod rnn;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use error::{GradError, Result};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use rnn::{bigru, gru_cell, GruParams, GruVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

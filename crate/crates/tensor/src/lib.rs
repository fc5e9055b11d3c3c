//! Minimal N-dimensional tensor engine with reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; computations are recorded on a [`Tape`] and
//! referenced through [`Var`] handles. Ops are methods on the tape:
//!
//! ```
//! use gaitforge_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap(), true);
//! let y = tape.relu(x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 1.0]);
//! ```

pub mod checkpoint;
mod element;
mod error;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, Entry};
pub use element::{gemm, DType, Element, MatLayout};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::conv::conv_out_len;
pub use ops::elementwise::broadcast_shape;
pub use ops::norm::BatchStats;
pub use ops::resize::resize_plane;
pub use ops::shape::{permute_index, GATHER_ZERO};
pub use tape::{Tape, Var};
pub use tensor::{contiguous_strides, Tensor};

/// Train/eval switch for normalization and stochastic regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

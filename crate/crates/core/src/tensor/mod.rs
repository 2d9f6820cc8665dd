//! Dense matrices, truncated SVD and the reverse-mode tape.

mod matrix;
pub mod svd;
pub mod tape;

pub use matrix::{dense_op, DenseOp, Matrix};
pub use svd::{truncated_svd, SvdResult};
pub use tape::{Gradients, NodeId, Segment, Tape};

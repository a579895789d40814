//! Tape operations.
//!
//! Split by family: [`elem`] (elementwise and structural), [`conv`]
//! (grouped/dilated 2d convolution), [`pool`] (3x3 and global pooling),
//! [`norm`] (channel normalization), [`loss`] (fully-connected layer and
//! cross-entropy). Every op validates shapes on entry and registers a backward
//! step when any input tracks gradients.

pub mod conv;
pub mod elem;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::Conv2dSpec;
pub use norm::BatchStats;

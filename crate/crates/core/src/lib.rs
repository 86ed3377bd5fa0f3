//! Reconstruction of residual-network inputs from intermediate feature maps.
//!
//! Residual blocks are inverted one at a time, deepest first, by a penalty
//! method over the split `W₁x = p − n` with projected Adam steps. The stem in
//! front of the first block is then inverted by regularized embedding
//! inversion. A sign-pattern enumeration oracle certifies the block solver on
//! small instances.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod blockinv;
pub mod error;
pub mod forward;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod shallowinv;
pub mod tensor;

pub use blockinv::{invert_block, InversionReport, PenaltyConfig};
pub use error::{PeelError, Result};
pub use forward::{network_forward, resblock_forward, TapTrace};
pub use model::{Block, NetworkSpec, ResBlockSpec};
pub use oracle::{lstsq, oracle_invert_block, OracleSolution};
pub use pipeline::{invert_nonresidual, peel, peel_with_truth, PeelRun, Truth};
pub use shallowinv::{invert_shallow, ShallowConfig, ShallowReport};
pub use tensor::{ConvGeometry, Tensor};

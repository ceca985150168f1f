//! Direct convolution on VLEN-blocked tensors.
//!
//! The crate is `no_std` (it needs `alloc`) and contains everything that is
//! pure computation: layer geometry, blocked layouts, reference oracles,
//! specialized microkernels, the planner, kernel streams (dryrun/replay) and
//! the forward, backward and weight-update drivers. Threads are supplied by
//! the caller through the [`Parallel`] trait; [`Sequential`] runs every
//! logical worker on the calling thread.
//!
//! Layouts follow the usual blocked convention:
//!
//! * activations: `[N][C_b][H_p][W_p][VLEN]` (`H_p`, `W_p` include the halo)
//! * weights: `[K_b][C_b][R][S][VLEN_c][VLEN_k]`
#![no_std]

#[cfg(test)]
extern crate std;

extern crate alloc;

pub mod element;
pub mod error;
pub mod exec;
pub mod layer;
pub mod microkernel;
pub mod oracle;
pub mod planner;
mod prefetch;
pub mod propagation;
pub mod stream;
pub mod tensor;

pub use element::Element;
pub use error::{Error, Result};
pub use exec::{Parallel, Sequential};
pub use layer::{derive_output_shape, ConvLayerSpec, RESNET50_LAYERS};
pub use tensor::{error_norms, BlockedActivation, BlockedWeight, ErrorNorms, Tensor4};

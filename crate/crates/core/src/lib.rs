//! Continual training of a frozen dense transformer through a parallel,
//! copy-initialized mixture-of-experts branch.
//!
//! The crate is layered: [`tensor`], [`tape`] and [`optim`] form a small
//! reverse-mode autodiff core; [`model`] and [`moe`] build the transformer and
//! its MoE extension on top; [`corpus`], [`train`] and [`eval`] provide the
//! synthetic languages, training loops and measurement harness.
//!
//! Heavy kernels are row-parallel through rayon behind the default `parallel`
//! feature, and bit-identical to the sequential path.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod moe;
pub mod optim;
pub mod par;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{FusionMode, Model, ModelConfig, ParamCensus};
pub use params::ParamStore;
pub use tensor::Tensor;

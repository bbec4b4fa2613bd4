//! Object-centric representation learning for block pushing.
//!
//! This crate is `no_std` (with `alloc`) and holds every algorithmic piece:
//! a small reverse-mode autodiff engine, the block-pushing simulator and
//! renderer, the slot-attention autoencoder, the autoencoder and momentum
//! contrast baselines, PCK localization and behavior cloning policies.
//! File formats, the CLI and experiment orchestration live in the `slotbench`
//! crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baselines;
pub mod error;
pub mod graph;
pub mod localize;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod policy;
pub mod real;
pub mod scene;
pub mod slot;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Grads, Init, ParamId, ParamStore};
pub use real::Real;

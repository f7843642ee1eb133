//! Sequential recommendation with transitive ranking losses.
//!
//! The crate covers the whole pipeline: interaction logs and leave-one-out
//! splits ([`corpus`]), popularity/uniform negative sampling with weak,
//! strict and disjoint preference ordering ([`sampling`]), a small
//! reverse-mode autodiff layer ([`tensor`]), a causal self-attention encoder
//! ([`encoder`]), pairwise/pointwise/setwise losses and their transitive
//! extensions ([`losses`]), training ([`trainer`]) and full-pool ranking
//! evaluation ([`eval`]). Experiments are described by a flat [`config`].

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod sampling;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

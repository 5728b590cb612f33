//! Optimal impact-time guidance toolkit.
//!
//! Pipeline: backward generation of optimal trajectories over a controlled
//! region ([`datagen`]), curvature-aware dataset reduction ([`eds_filter`]),
//! Gaussian-process learning of the optimal command ([`gpr`]) and
//! confidence-weighted closed-loop simulation ([`guidance_sim`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod dataset;
pub mod dynamics;
pub mod eds_filter;
pub mod error;
pub mod gpr;
pub mod guidance_sim;
pub mod kdtree;
pub mod ode;
pub mod plot;

pub use error::{Error, Result};

//! Script-driven, temporally controllable audio synthesis at desk scale.
//!
//! The crate is organized around a small reverse-mode autodiff tensor engine
//! ([`tensor`]), structured temporal script features ([`sts`]), a multimodal
//! transformer with a removable script-fusion adapter ([`model`]), flow-matching
//! training and sampling ([`flow`]), dual-branch in/out-of-frame synthesis
//! ([`biframe`]), a procedural audio-visual world ([`synthworld`]), and a
//! controllability/quality evaluation harness ([`eval`]).

pub mod biframe;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod rng;
pub mod sts;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};

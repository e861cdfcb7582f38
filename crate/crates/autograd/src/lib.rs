//! Minimal double-precision deep-learning toolkit: dense matrices, a reverse-mode tape,
//! a handful of layers and an AdamW optimizer. Everything runs single-threaded and is
//! bit-for-bit deterministic for a given input.

pub mod graph;
pub mod matrix;
pub mod nn;
pub mod optim;
pub mod params;

pub use graph::{sigmoid, softmax_in_place, Graph, OverlapKind, Var};
pub use matrix::Matrix;
pub use optim::{clip_global_norm, global_norm, AdamW};
pub use params::{ParamEntry, ParamId, ParamStore};

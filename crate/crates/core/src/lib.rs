//! Joint grounding and dense captioning of untrimmed videos as set prediction over
//! learned event proposals.

pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod etg;
pub mod eval;
pub mod experiment;
pub mod matcher;
pub mod model;
pub mod plot;
pub mod teg;
pub mod trainer;

pub use error::{GvlError, Result};

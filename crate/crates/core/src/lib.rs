//! Polymorphic feature interpreter for heterogeneous collaborative perception.
//!
//! A single interpreter network plus per-neighbor learnable prompts maps
//! intermediate BEV features from foreign, frozen encoders into the ego
//! agent's feature space. The crate holds a small autodiff engine, synthetic
//! scenes, toy encoders and a detection head, the interpreter and its losses,
//! the two training phases and AP evaluation.

pub mod config;
pub mod detection;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod interpreter;
pub mod losses;
pub mod numerics;
pub mod rng;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Parameter, Tape, Tensor, Var};

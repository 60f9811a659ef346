//! GhostRNN and GRU recurrent cells in pure Rust, with exact backpropagation
//! through time, redundancy analysis of hidden-state feature maps, closed-form
//! complexity counts, synthetic tasks and a deterministic trainer.
//!
//! A GhostRNN cell keeps a small *intrinsic* state `h` that runs a GRU-style
//! recurrence and derives the remaining *ghost* state `g = φ(h)` through a
//! cheap learned map. With `ratio == 1` it reduces to a plain GRU.

pub mod backprop;
pub mod cells;
pub mod complexity;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod params;
pub mod redundancy;
pub mod rng;
pub mod svd;
pub mod tasks;
pub mod trainer;

pub use cells::{Activation, CellKind, CellParams, CellState, GhostParams, GruParams};
pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use model::Model;
pub use params::Parameters;
pub use rng::RngState;

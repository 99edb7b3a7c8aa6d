//! Minimal tensor graph with reverse-mode gradients.
//!
//! Every tensor is an `Array4` laid out as `[batch, channels, height, width]`;
//! vectors are carried as `[batch, len, 1, 1]`. The graph records each op
//! together with what its backward pass needs, and [`Graph::backward`] walks it
//! in reverse. Only the ops the networks use are provided.

mod conv;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod real;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use real::Real;

//! Minimal differentiable building blocks for the denoiser.

mod graph;
mod params;

pub use graph::{Grads, Graph, TokenLayout, Var, NORM_EPS};
pub use params::{Bound, ParamId, ParamStore};

#[cfg(test)]
mod gradcheck;

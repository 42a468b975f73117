//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! walks the record in reverse. Trainable weights live in a [`Params`] store
//! that also carries the Adam moments, so a graph is cheap to throw away
//! after each step. Values are stored in `f64`; parameter files hold `f32`.

mod array;
pub mod check;
mod checkpoint;
mod conv;
mod graph;
mod params;

pub use array::Array;
pub use checkpoint::{decode_params, encode_params, load_arrays, save_params, ArrayEntry};
pub use graph::{Graph, Var};
pub use params::{Adam, ParamId, Params};

/// Default instance normalisation epsilon.
pub const NORM_EPS: f64 = 1e-5;

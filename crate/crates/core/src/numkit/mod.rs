//! Dense matrices, random streams, layers and the reverse-mode tape.

pub mod graph;
pub mod layers;
pub mod matrix;
pub mod params;
pub mod rng;

pub use graph::{BatchStats, Graph, Var};
pub use layers::{ForwardCtx, Mode};
pub use matrix::Matrix;
pub use params::{Adam, Binding, ParamId, ParamSnapshot, ParamStore};
pub use rng::{RngStream, Stream};

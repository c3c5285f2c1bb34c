pub mod autograd;
pub mod cli;
pub mod cloud;
pub mod deformer;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod indicator;
pub mod losses;
pub mod model;
pub mod params;
pub mod train;

pub use autograd::{Graph, Tensor, Var};
pub use cloud::{PointCloud, ShapePair};
pub use error::{Error, Result};

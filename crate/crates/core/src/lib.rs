//! Differentiable point-cloud toolkit built around learned adaptive sampling and
//! local-nonlocal feature cells.

pub mod bench;
pub mod cell;
pub mod data;
pub mod error;
pub mod experiment;
pub mod geom;
pub mod gradcheck;
pub mod gradsuite;
pub mod network;
pub mod nn;
pub mod params;
pub mod sampling;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use geom::PointCloud;
pub use params::ParamStore;
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;

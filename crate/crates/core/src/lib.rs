pub mod cli;
pub mod codec;
pub mod config;
pub mod container;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rans;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{DcaeError, Result};
pub use graph::{Graph, Var};
pub use params::{ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
pub use codec::{compress, decompress};
pub use image::Image;
pub use model::DcaeModel;

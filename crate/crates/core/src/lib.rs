pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod gradsuite;
pub mod error;
pub mod metrics;
pub mod mlstm;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{backward, GradientMap, ParamId, Tensor};

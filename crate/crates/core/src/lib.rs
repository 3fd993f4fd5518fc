pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcam;
pub mod imageio;
pub mod layers;
pub mod multiscale;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result, TensorError};
pub use params::{ParamId, ParamStore};
pub use tensor::{Axis, Element, Shape, Tensor4};

pub mod camera;
pub mod error;
pub mod image_io;
pub mod kernels;
pub mod losses;
pub mod mesh;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod renderer;
pub mod synth;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::Tensor;

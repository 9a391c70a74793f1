pub mod cloud;
pub mod model;
pub mod raster;
pub mod scalar;
pub mod solver;
pub mod spice;
pub mod synth;
pub mod tensor;
pub mod train;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;

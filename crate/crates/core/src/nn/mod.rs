//! Minimal CPU neural-network substrate: f32 tensors, convolution via
//! im2col + GEMM, bilinear resampling, and optimizers. Every layer exposes an
//! explicit forward-with-cache / backward pair; there is no tape.

pub mod conv;
pub mod gemm;
pub mod optim;
pub mod param;
pub mod resize;

pub use conv::{Conv2d, ConvCache};
pub use optim::{AdamW, OptimState, Optimizer, Sgd};
pub use param::Param;

/// A single sample's feature map, channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self { channels, height, width, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero the upstream gradient wherever the ReLU output was clamped.
pub fn relu_backward_inplace(grad: &mut [f32], output: &[f32]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

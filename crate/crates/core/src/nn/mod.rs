//! Minimal dense numerics for the detector: tensors, convolution with exact
//! gradients, ReLU, Adam, a finite-difference checker and checkpoints.

mod adam;
pub mod checkpoint;
pub(crate) mod conv;
mod gradcheck;
mod tensor;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_size, ConvGrads, ConvLayer};
pub use gradcheck::{central_difference, grad_check, grad_check_coords, relative_error};
pub use tensor::Tensor;

/// Elementwise `max(0, x)`.
pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` through where `x > 0`, zero elsewhere.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> crate::Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(crate::Error::shape(
            "relu_backward",
            x.shape(),
            upstream.shape(),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

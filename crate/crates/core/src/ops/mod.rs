//! Forward and backward kernels for every layer the architectures use.

mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use conv::{
    conv3d_backward, conv3d_backward_bias, conv3d_backward_input, conv3d_backward_weight,
    conv3d_forward, ConvGrads, ConvSpec,
};
pub use linear::{linear_backward, linear_forward};
pub use loss::{argmax_rows, softmax, softmax_xent, XentOutput};
pub use norm::{BatchNorm, BatchNormSpec, BnCache, Mode};
pub use pool::{
    global_avgpool_backward, global_avgpool_forward, maxpool3d_backward, maxpool3d_forward,
    PoolCache, PoolSpec,
};

use crate::tensor::{Scalar, Tensor5};

/// ReLU backward given the forward output: passes gradient where `out > 0`.
pub fn relu_backward<T: Scalar>(output: &Tensor5<T>, grad_output: &Tensor5<T>) -> crate::Result<Tensor5<T>> {
    output.zip_map(grad_output, |y, g| if y > T::zero() { g } else { T::zero() })
}
